"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line (printed in the terminal summary). The
end-to-end criteria share one set of trained runs: Grid World-S analogue,
1000+1000 train / 200+200 test, default architecture and loss weights.
"""
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import record
from critstate import cli
from critstate.applications import (
    CRITICAL,
    RANDOM,
    DqnConfig,
    attack_eval,
    attack_policy,
    dqn_env_config,
    dqn_train,
    n_step_target,
    n_step_targets,
    policy_labelled,
    region_confidence,
)
from critstate.core import split_dataset
from critstate.evaluation import category_report, detect, eval_suite
from critstate.gridworld import EnvConfig, GenerationConfig, generate_dataset
from critstate.models import ArchitectureSpec, init_params, tiny_spec
from critstate.training import (
    Batch,
    LossWeights,
    TrainConfig,
    detector_parts,
    loss_compactness,
    loss_detector_total,
    ortho_penalty,
    predictor_loss,
    train,
)

pytestmark = pytest.mark.slow

ENV = EnvConfig()
EPOCHS = 3
FULL_SEEDS = (0, 1, 2, 3)  # criterion 3/4/6 use the first three, criterion 5 all four
IMP_SEEDS = (0, 1, 2)


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


# --- shared heavy fixtures ----------------------------------------------------------


@pytest.fixture(scope="session")
def gridworld_s():
    data = generate_dataset(ENV, GenerationConfig(n_success=1200, n_fail=1200, seed=0))
    return split_dataset(data, 1 / 6, 0)


@pytest.fixture(scope="session")
def runs(gridworld_s):
    """Trained (G, D) and test reports for the full loss and the imp-only ablation."""
    train_set, test_set = gridworld_s
    out = {"full": {}, "imp": {}}
    for name, seeds, w in (
        ("full", FULL_SEEDS, LossWeights()),
        ("imp", IMP_SEEDS, LossWeights.from_flags(["imp"])),
    ):
        for seed in seeds:
            t = time.time()
            res = train(train_set, ArchitectureSpec(), TrainConfig(epochs=EPOCHS, seed=seed), w)
            masks = detect(res.D, test_set)
            rep = eval_suite(res.G, None, test_set, masks=masks)
            out[name][seed] = {"G": res.G, "D": res.D, "masks": masks, "report": rep, "time": time.time() - t}
    return out


def _median(runs, key, seeds):
    return float(np.median([getattr(runs[s]["report"], key) for s in seeds]))


# --- 1. loss oracles ----------------------------------------------------------------


def test_criterion_01_loss_oracles():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = {"compactness": 0.0, "total": 0.0, "ortho": 0.0, "n_step": 0.0}
    for _ in range(1000):
        b, T = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        m = rng.uniform(0, 1, size=(b, T))
        lengths = rng.integers(1, T + 1, size=b)
        valid = np.arange(T)[None, :] < lengths[:, None]
        got = float(loss_compactness(torch.as_tensor(m), torch.as_tensor(valid)))
        want = sum(abs(m[i, t]) for i in range(b) for t in range(T) if valid[i, t]) / b
        worst["compactness"] = max(worst["compactness"], rel_err(got, want))

        lam = rng.uniform(0, 3, size=4)
        parts = {k: float(rng.normal()) for k in ("imp", "com", "rev", "orth")}
        w = LossWeights(*lam)
        got = float(loss_detector_total(w, {k: torch.tensor(v, dtype=torch.float64) for k, v in parts.items()}))
        want = lam[0] * parts["imp"] + lam[1] * parts["com"] + lam[2] * parts["rev"] + lam[3] * parts["orth"]
        worst["total"] = max(worst["total"], rel_err(got, want))

        bb = int(rng.integers(2, 6))
        M = rng.normal(size=(bb, T))
        got = float(ortho_penalty(torch.as_tensor(M)))
        acc = 0.0
        for i in range(bb):
            for j in range(bb):
                if i != j:
                    acc += abs(sum(M[i, k] * M[j, k] for k in range(T)))
        worst["ortho"] = max(worst["ortho"], rel_err(got, acc / (bb * (bb - 1))))

        L = int(rng.integers(1, 9))
        r = rng.normal(size=L)
        gamma, n = float(rng.uniform(0, 1)), int(rng.integers(1, 6))
        boot, term = float(rng.normal()), bool(rng.integers(2))
        want = 0.0
        for i in range(min(n, L)):
            want += gamma**i * r[i]
        if not (min(n, L) == L and term):
            want += gamma ** min(n, L) * boot
        got_scalar = n_step_target(r.tolist(), gamma, n, boot, term)
        rew = np.zeros((1, 5))
        rew[0, : min(5, L)] = r[:5]
        got_batch = float(n_step_targets(torch.as_tensor(rew), torch.tensor([n]), torch.tensor([L]),
                                         torch.tensor([boot], dtype=torch.float64), torch.tensor([term]), gamma)[0])
        worst["n_step"] = max(worst["n_step"], rel_err(got_scalar, want), rel_err(got_batch, want))
    runtime = time.time() - t0
    ok = all(v < 1e-6 for v in worst.values()) and runtime < 60
    record(1, ok, f"max rel err {max(worst.values()):.2e} over 4x1000 instances, {runtime:.1f}s")
    assert ok, worst


# --- 2. gradient check --------------------------------------------------------------


def test_criterion_02_finite_difference():
    t0 = time.time()
    spec = tiny_spec()
    G, D = init_params(spec, 5), init_params(spec.detector(), 6)
    g = torch.Generator().manual_seed(0)
    frames = torch.rand(3, 4, 7, 7, 3, generator=g, dtype=torch.float64)
    valid = torch.tensor([[1, 1, 1, 1], [1, 1, 1, 0], [1, 1, 0, 0]], dtype=torch.bool)
    batch = Batch(frames, valid, torch.tensor([0, 1, 1]), [0, 1, 2])
    cfg = TrainConfig()

    def losses():
        return {
            "G": predictor_loss(G(frames, valid), batch.labels, "discrete"),
            "D": loss_detector_total(LossWeights(), detector_parts(G, D, batch, LossWeights(), cfg)),
        }

    rng = np.random.default_rng(1)
    worst, checked = 0.0, 0
    for net_name, net in (("G", G), ("D", D)):
        params = [p for p in net.parameters() if p.numel()]
        for p in params:
            p.grad = None
        loss = losses()[net_name]
        grads = torch.autograd.grad(loss, params)
        for _ in range(12):
            k = int(rng.integers(len(params)))
            p, gr = params[k], grads[k].reshape(-1)
            idx = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            old = flat[idx].item()
            h = 1e-6
            flat[idx] = old + h
            up = losses()[net_name].item()
            flat[idx] = old - h
            down = losses()[net_name].item()
            flat[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(gr[idx].item() - fd) / (abs(fd) + 1e-8))
            checked += 1
    runtime = time.time() - t0
    ok = worst < 1e-3 and checked >= 20 and runtime < 120
    record(2, ok, f"{checked} params, max rel err {worst:.2e}, float64, {runtime:.1f}s")
    assert ok


# --- 3-6. Grid World-S end to end ---------------------------------------------------


def test_criterion_03_end_to_end(runs):
    seeds = FULL_SEEDS[:3]
    clean = _median(runs["full"], "clean_acc", seeds)
    masked = _median(runs["full"], "masked_acc", seeds)
    rmasked = _median(runs["full"], "rmasked_acc", seeds)
    minutes = sum(runs["full"][s]["time"] for s in seeds) / 60
    ok = clean >= 95 and abs(clean - masked) <= 3 and rmasked <= 70
    record(3, ok, f"median clean {clean:.2f} masked {masked:.2f} r-masked {rmasked:.2f} "
                  f"(3 seeds, {EPOCHS} epochs, {minutes:.1f} min training)")
    assert ok


def test_criterion_04_detection_f1(runs):
    full = [runs["full"][s]["report"].f1 for s in FULL_SEEDS[:3]]
    imp = [runs["imp"][s]["report"].f1 for s in IMP_SEEDS]
    f_med, i_med = float(np.median(full)), float(np.median(imp))
    ok = f_med >= 0.70 and f_med - i_med >= 0.05
    record(4, ok, f"full-loss median F1 {f_med:.3f} vs imp-only {i_med:.3f} (gap {100 * (f_med - i_med):.1f} points)")
    assert ok


def test_criterion_05_categories(runs, gridworld_s):
    _, test_set = gridworld_s
    rep = category_report([runs["full"][s]["masks"] for s in FULL_SEEDS], test_set, ENV)
    locked, normal = rep.mean("open_locked_door"), rep.mean("normal")
    with_key, without_key = rep.mean("open_door_with_key"), rep.mean("open_door_without_key")
    present = None not in (locked, normal, with_key, without_key)
    ok = present and locked - normal >= 10 and with_key > without_key
    fmt = lambda v: "absent" if v is None else f"{v:.2f}"
    record(5, ok, f"locked door {fmt(locked)} vs normal {fmt(normal)}; door with key {fmt(with_key)} "
                  f"vs without {fmt(without_key)} (4 seeds)")
    assert ok


def test_criterion_06_ablation_traces(runs):
    imp_mean = float(np.median([runs["imp"][s]["report"].mean_mask for s in IMP_SEEDS]))
    imp_var = float(np.median([runs["imp"][s]["report"].var_mask for s in IMP_SEEDS]))
    full_var = float(np.median([runs["full"][s]["report"].var_mask for s in FULL_SEEDS[:3]]))
    ok = imp_mean > 0.9 and imp_var < 1e-3 and full_var >= 0.02
    record(6, ok, f"imp-only mean {imp_mean:.3f} var {imp_var:.2e}; full-loss var {full_var:.4f}")
    assert ok


# --- 7. attacks ---------------------------------------------------------------------


def test_criterion_07_attack(runs):
    D = runs["full"][0]["D"]
    seeds = range(100000, 100300)
    crit = attack_eval(D, attack_policy(), ENV, seeds, k=3, mode=CRITICAL)
    rand = attack_eval(D, attack_policy(), ENV, seeds, k=3, mode=RANDOM)
    unseen = attack_eval(D, attack_policy(tie_seed=7), ENV, seeds, k=3, mode=CRITICAL)
    margin = crit.drop - rand.drop
    retained = unseen.drop / crit.drop if crit.drop > 0 else 0.0
    ok = margin >= 10 and crit.drop > 0 and retained >= 0.5
    record(7, ok, f"critical drop {crit.drop:.1f}±{crit.drop_std:.1f} vs random {rand.drop:.1f}±{rand.drop_std:.1f}; "
                  f"unseen-seed policy drop {unseen.drop:.1f} ({100 * retained:.0f}% retained)")
    assert ok


# --- 8. policy comparison -----------------------------------------------------------


def test_criterion_08_policy_comparison():
    data = generate_dataset(ENV, GenerationConfig(mode="policies", policy_counts=(600, 600), seed=1))
    train_set, test_set = split_dataset(data, 1 / 6, 1)
    res = train(train_set, ArchitectureSpec(), TrainConfig(epochs=EPOCHS, seed=0), LossWeights())
    rep = eval_suite(res.G, res.D, test_set)
    policy_b = test_set.subset([i for i, e in enumerate(test_set.episodes) if e.policy_id == 1])
    regions = region_confidence(detect(res.D, policy_b), policy_b, ENV)
    decoy, corridor = regions["decoy_mean"], regions["corridor_normal_mean"]
    ok = rep.clean_acc >= 95 and decoy is not None and corridor is not None and decoy > corridor
    record(8, ok, f"classifier accuracy {rep.clean_acc:.2f}; decoy-room confidence {decoy:.2f} "
                  f"vs corridor normal {corridor:.2f}")
    assert ok


# --- 9. adaptive lookahead ----------------------------------------------------------


DQN_STEPS = 15000


def test_criterion_09_adaptive_dqn():
    # unit targets first: n = 1 is plain one-step DQN
    unit = (
        n_step_target([1.0], 0.99, 1, 3.0, terminal=True) == 1.0
        and n_step_target([0.0, 1.0], 0.5, 1, 4.0, terminal=False) == 2.0
        and n_step_target([1.0, 1.0], 0.5, 2, 4.0, terminal=False) == 2.5
    )
    env = dqn_env_config()
    data = generate_dataset(env, GenerationConfig(n_success=300, n_fail=300, seed=5))
    det = train(data, ArchitectureSpec(), TrainConfig(epochs=2, seed=0), LossWeights(lambda_orth=1.0)).D
    base = DqnConfig(total_steps=DQN_STEPS, train_every=2)
    finals = {}
    for mode in ("adaptive", "fixed"):
        finals[mode] = [dqn_train(env, det, replace(base, lookahead=mode), s).final_success_rate for s in (0, 1, 2)]
    ada, fix = float(np.median(finals["adaptive"])), float(np.median(finals["fixed"]))
    ok = unit and ada >= fix
    record(9, ok, f"median final success adaptive {ada:.3f} {finals['adaptive']} vs fixed n=5 {fix:.3f} "
                  f"{finals['fixed']} at {DQN_STEPS} steps; unit targets {'exact' if unit else 'WRONG'}")
    assert ok


# --- 10. determinism ----------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = {
        "dataset": {"n_success": 8, "n_fail": 8},
        "model": {"channels": [8, 16, 16, 16, 32], "hidden": 16},
        "train": {"epochs": 2, "batch_size": 4},
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    outs = []
    for run in ("a", "b"):
        g, t = tmp_path / f"gen_{run}", tmp_path / f"train_{run}"
        assert cli.run(["gen", "--config", str(tmp_path / "c.json"), "--seed", "3", "--out", str(g)]) == 0
        assert cli.run(["train", "--config", str(tmp_path / "c.json"), "--seed", "3", "--data", str(g),
                        "--out", str(t)]) == 0
        outs.append([(g / "train.dsi").read_bytes(), (g / "test.dsi").read_bytes(),
                     (g / "metrics.json").read_bytes(), (t / "metrics.json").read_bytes(),
                     (t / "model.dsi").read_bytes()])
    same = [x == y for x, y in zip(*outs)]
    ok = all(same)
    record(10, ok, f"byte-identical: datasets {same[0] and same[1]}, gen metrics {same[2]}, "
                   f"train metrics {same[3]}, checkpoint {same[4]}")
    assert ok
