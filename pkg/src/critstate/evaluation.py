"""Mask binarisation, F1, the clean/masked/reverse-masked accuracy suite,
per-category confidence reports and the loss-ablation runner."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DISCRETE, Dataset, Episode, Mask
from .gridworld.data import (
    CRITICAL_KINDS,
    actionable_distance,
    annotate_critical,
    event_windows,
    replay_states,
)
from .gridworld.env import EnvConfig, EventKind
from .models import SequenceNet
from .training import LossWeights, PackedEpisodes, TrainConfig, masked_frames, train

log = logging.getLogger(__name__)

NORMAL_DISTANCE = 2


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def binarize_mask(m, tau: float = 0.5) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    return (_values(m) >= tau).astype(np.int64)


def top_k_steps(m, k: int) -> list[int]:
    """Indices of the ``k`` largest confidences, earlier index first on ties."""
    v = _values(m)
    if not 1 <= k <= len(v):
        raise ValueError(f"k={k} outside [1, {len(v)}]")
    order = np.argsort(-v, kind="stable")
    return [int(i) for i in order[:k]]


def f1_score(pred, gt) -> float:
    """F1 of the positive class.

    No predicted and no actual positives gives 1; otherwise a side without
    positives gives 0.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    n_pred, n_gt = pred.sum(), gt.sum()
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    tp = (pred & gt).sum()
    return float(2 * tp / (n_pred + n_gt))


# --- detector outputs ---------------------------------------------------------------


def _no_grad_eval(*nets):
    for n in nets:
        n.eval()
    return torch.no_grad()


def detect(D: SequenceNet, dataset: Dataset, batch_size: int = 64) -> list[np.ndarray]:
    """Per-episode mask values over the valid steps."""
    packed = PackedEpisodes(dataset)
    out: list[np.ndarray | None] = [None] * len(packed)
    with _no_grad_eval(D):
        for b in packed.iter_batches(batch_size, dtype=D.spec.torch_dtype):
            m = D(b.frames, b.valid).double().numpy()
            for row, i in enumerate(b.index):
                out[i] = m[row, : int(b.valid[row].sum())]
    return out


def predict(G: SequenceNet, dataset: Dataset, masks=None, invert: bool = False, batch_size: int = 64) -> np.ndarray:
    """Predictor outputs on raw or (reverse-)masked episodes."""
    packed = PackedEpisodes(dataset)
    outs = [None] * len(packed)
    with _no_grad_eval(G):
        for b in packed.iter_batches(batch_size, dtype=G.spec.torch_dtype):
            frames = b.frames
            if masks is not None:
                m = torch.zeros(b.valid.shape, dtype=frames.dtype)
                for row, i in enumerate(b.index):
                    mi = torch.as_tensor(np.asarray(masks[i]), dtype=frames.dtype)
                    m[row, : len(mi)] = mi
                frames = masked_frames(frames, 1.0 - m if invert else m)
            y = G(frames, b.valid).double().numpy()
            for row, i in enumerate(b.index):
                outs[i] = y[row]
    return np.stack(outs)


@dataclass
class EvalReport:
    clean_acc: float | None
    masked_acc: float | None
    rmasked_acc: float | None
    l1_mask: float
    var_mask: float
    f1: float | None = None
    mean_mask: float = 0.0
    n_episodes: int = 0
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _accuracy(out: np.ndarray, labels: np.ndarray) -> float:
    return float(100.0 * np.mean(out.argmax(-1) == labels))


def mask_statistics(masks) -> tuple[float, float, float]:
    """(mean per-episode sum, mean per-episode variance, mean value)."""
    sums = [float(np.sum(m)) for m in masks]
    var = [float(np.var(m)) for m in masks]
    mean = [float(np.mean(m)) for m in masks]
    return float(np.mean(sums)), float(np.mean(var)), float(np.mean(mean))


def detection_f1(masks, dataset: Dataset, tau: float = 0.5, window: int = 1) -> float:
    """F1 pooled over every step of every episode."""
    pred = np.concatenate([binarize_mask(m, tau) for m in masks])
    gt = np.concatenate([annotate_critical(e, window)[: len(m)] for e, m in zip(dataset.episodes, masks)])
    return f1_score(pred, gt)


def eval_suite(
    G: SequenceNet,
    D: SequenceNet | None,
    dataset: Dataset,
    masks=None,
    tau: float = 0.5,
    window: int = 1,
    batch_size: int = 64,
) -> EvalReport:
    """Clean/masked/reverse-masked accuracy plus mask statistics and F1.

    ``masks`` overrides the detector (e.g. an all-ones mask).
    """
    if masks is None:
        if D is None:
            raise ValueError("need a detector or explicit masks")
        masks = detect(D, dataset, batch_size)
    labels = dataset.labels
    l1, var, mean = mask_statistics(masks)
    has_events = any(e.events for e in dataset.episodes)
    f1 = detection_f1(masks, dataset, tau, window) if has_events else None
    if dataset.label_kind != DISCRETE:
        return EvalReport(None, None, None, l1, var, f1, mean, len(dataset))
    clean = predict(G, dataset, batch_size=batch_size)
    masked = predict(G, dataset, masks, batch_size=batch_size)
    rmasked = predict(G, dataset, masks, invert=True, batch_size=batch_size)
    return EvalReport(
        _accuracy(clean, labels),
        _accuracy(masked, labels),
        _accuracy(rmasked, labels),
        l1,
        var,
        f1,
        mean,
        len(dataset),
    )


# --- per-category confidences -------------------------------------------------------

EVENT_CATEGORIES = (
    EventKind.open_door_without_key.value,
    EventKind.try_locked_door_without_key.value,
    EventKind.pickup_key.value,
    EventKind.open_door_with_key.value,
    EventKind.open_locked_door.value,
)
CATEGORIES = ("normal", "normal_before_key", "normal_after_key") + EVENT_CATEGORIES


@dataclass
class CategoryReport:
    """Mean/std of confidences (x100) per state category; ``None`` marks absent."""

    stats: dict

    def mean(self, category: str) -> float | None:
        s = self.stats.get(category)
        return None if s is None else s["mean"]

    def to_dict(self) -> dict:
        return dict(self.stats)

    def table(self) -> str:
        lines = [f"{'category':32s} {'mean':>7s} {'std':>7s} {'n':>7s}"]
        for c in CATEGORIES:
            s = self.stats.get(c)
            if s is None:
                lines.append(f"{c:32s} {'absent':>7s}")
            else:
                lines.append(f"{c:32s} {s['mean']:7.2f} {s['std']:7.2f} {s['n']:7d}")
        return "\n".join(lines)


def category_values(masks, dataset: Dataset, cfg: EnvConfig | None = None, window: int = 1) -> dict:
    """Pool per-step confidences (x100) by category across episodes."""
    if cfg is None:
        cfg = EnvConfig(**_env_dict(dataset))
    pools: dict[str, list] = {c: [] for c in CATEGORIES}
    for e, m in zip(dataset.episodes, masks):
        m = 100.0 * np.asarray(m, dtype=np.float64)
        for kind in EVENT_CATEGORIES:
            sel = event_windows(e, kind, window)[: len(m)]
            pools[kind].extend(m[sel].tolist())
        states = replay_states(e, cfg)
        for t, s in enumerate(states[: len(m)]):
            if actionable_distance(s) > NORMAL_DISTANCE:
                pools["normal"].append(m[t])
                pools["normal_after_key" if s.carrying is not None else "normal_before_key"].append(m[t])
    return pools


def _env_dict(dataset: Dataset) -> dict:
    d = dict(dataset.manifest.get("env_config", {}))
    if "door_colors" in d:
        d["door_colors"] = tuple(d["door_colors"])
    return d


def summarize_categories(pools: dict) -> CategoryReport:
    stats = {}
    for c in CATEGORIES:
        v = pools.get(c, [])
        stats[c] = None if not v else {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
    return CategoryReport(stats)


def category_report(D_or_masks, dataset: Dataset, cfg: EnvConfig | None = None, window: int = 1) -> CategoryReport:
    """Category report from a detector, a list of masks, or a list of per-seed mask lists."""
    if isinstance(D_or_masks, SequenceNet):
        runs = [detect(D_or_masks, dataset)]
    elif D_or_masks and isinstance(D_or_masks[0], list):
        runs = D_or_masks
    else:
        runs = [D_or_masks]
    pools: dict[str, list] = {c: [] for c in CATEGORIES}
    for masks in runs:
        for c, v in category_values(masks, dataset, cfg, window).items():
            pools[c].extend(v)
    return summarize_categories(pools)


# --- ablation -----------------------------------------------------------------------

DEFAULT_COMBINATIONS = (
    ("imp",),
    ("imp", "com"),
    ("com", "rev"),
    ("imp", "rev"),
    ("imp", "com", "rev"),
)


@dataclass
class AblationRow:
    flags: tuple
    f1: list
    reports: list

    @property
    def median_f1(self) -> float:
        return float(np.median(self.f1))

    @property
    def f1_variance(self) -> float:
        return float(np.var(self.f1))


def ablation_run(
    train_set: Dataset,
    test_set: Dataset,
    spec,
    cfg: TrainConfig,
    combinations=DEFAULT_COMBINATIONS,
    seeds=(0, 1, 2),
    base_weights: LossWeights = LossWeights(),
    tau: float = 0.5,
    trace_dir=None,
    n_traces: int = 4,
) -> list[AblationRow]:
    """Train one detector per loss-term combination and seed and score it."""
    rows = []
    for flags in combinations:
        w = LossWeights.from_flags(flags, **asdict(base_weights))
        f1s, reports = [], []
        for seed in seeds:
            res = train(train_set, spec, _with_seed(cfg, seed), w)
            masks = detect(res.D, test_set)
            rep = eval_suite(res.G, None, test_set, masks=masks, tau=tau)
            rep.per_seed = [seed]
            f1s.append(rep.f1 if rep.f1 is not None else float("nan"))
            reports.append(rep)
            log.info("ablation %s seed %d: F1 %.4f", "+".join(flags), seed, f1s[-1])
            if trace_dir is not None:
                name = "_".join(flags) + f"_seed{seed}"
                write_traces(Path(trace_dir) / f"{name}.csv", masks[:n_traces], test_set.episodes[:n_traces])
        rows.append(AblationRow(tuple(flags), f1s, reports))
    return rows


def unstable_combinations(rows: list[AblationRow], factor: float = 3.0) -> list[tuple]:
    """Combinations whose F1 variance across seeds exceeds ``factor`` x the full loss's."""
    full = next((r for r in rows if set(r.flags) == {"imp", "com", "rev"}), None)
    if full is None:
        return []
    ref = max(full.f1_variance, 1e-12)
    return [r.flags for r in rows if r is not full and r.f1_variance > factor * ref]


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'terms':16s} {'median F1':>10s} {'var':>10s} {'L1':>8s} {'Var(mask)':>10s}"]
    for r in rows:
        l1 = np.mean([x.l1_mask for x in r.reports])
        var = np.mean([x.var_mask for x in r.reports])
        lines.append(f"{'+'.join(r.flags):16s} {100 * r.median_f1:10.2f} {1e4 * r.f1_variance:10.2f} {l1:8.2f} {var:10.4f}")
    return "\n".join(lines)


# --- traces -------------------------------------------------------------------------


def write_traces(path, masks, episodes, window: int = 1) -> None:
    """CSV of ``episode, step, confidence, critical`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "confidence", "critical"])
        for i, (m, e) in enumerate(zip(masks, episodes)):
            gt = annotate_critical(e, window)
            for t, v in enumerate(m):
                w.writerow([i, t, f"{float(v):.6f}", int(gt[t])])


def plot_trace(path, mask, episode: Episode, window: int = 1, title: str | None = None) -> None:
    """Confidence over time with ground-truth critical steps shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = np.asarray(mask, dtype=np.float64)
    gt = annotate_critical(episode, window)[: len(m)]
    fig, ax = plt.subplots(figsize=(7, 2.6))
    for t in np.flatnonzero(gt):
        ax.axvspan(t - 0.5, t + 0.5, color="tab:orange", alpha=0.25, lw=0)
    ax.plot(np.arange(len(m)), m, color="tab:blue", lw=1.5)
    for t, kind in episode.events:
        if t < len(m) and kind in CRITICAL_KINDS:
            ax.annotate(kind.replace("_", " "), (t, 1.0), fontsize=6, rotation=30, ha="left", va="bottom")
    ax.set_ylim(0, 1.05)
    ax.set_xlim(-0.5, len(m) - 0.5)
    ax.set_xlabel("step")
    ax.set_ylabel("confidence")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
