import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from critstate.evaluation import (
    CATEGORIES,
    AblationRow,
    EvalReport,
    ablation_run,
    ablation_table,
    binarize_mask,
    category_report,
    category_values,
    detect,
    detection_f1,
    eval_suite,
    f1_score,
    plot_trace,
    top_k_steps,
    unstable_combinations,
    write_traces,
)
from critstate.gridworld import EnvConfig, GenerationConfig, annotate_critical, generate_dataset
from critstate.models import init_params, tiny_spec
from critstate.training import TrainConfig

ENV = EnvConfig(grid_size=13)


@pytest.fixture(scope="module")
def small_set():
    return generate_dataset(ENV, GenerationConfig(n_success=6, n_fail=6, seed=3))


@pytest.fixture(scope="module")
def nets():
    spec = tiny_spec(dtype="float32")
    return init_params(spec, 1), init_params(spec.detector(), 2)


class TestBinarize:
    def test_example(self):
        np.testing.assert_array_equal(binarize_mask([0.2, 0.8, 0.1], 0.5), [0, 1, 0])

    def test_above_max(self):
        assert binarize_mask([0.2, 0.8], 0.81).sum() == 0

    def test_tau_range(self):
        with pytest.raises(ValueError):
            binarize_mask([0.5], 1.0)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0.01, 0.98), st.floats(0, 0.01))
    def test_monotone(self, v, tau, delta):
        hi = binarize_mask(v, tau + delta)
        lo = binarize_mask(v, tau)
        assert (lo >= hi).all()


class TestTopK:
    def test_examples(self):
        assert top_k_steps([0.9, 0.1, 0.9], 2) == [0, 2]
        assert sorted(top_k_steps([0.3, 0.2, 0.1], 3)) == [0, 1, 2]

    def test_range(self):
        with pytest.raises(ValueError):
            top_k_steps([0.1, 0.2], 3)
        with pytest.raises(ValueError):
            top_k_steps([0.1], 0)

    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=20), st.integers(0, 5), st.data())
    def test_nested_and_padding_invariant(self, v, pad, data):
        k = data.draw(st.integers(1, len(v) - 1))
        assert set(top_k_steps(v, k)) <= set(top_k_steps(v, k + 1))
        assert top_k_steps(v + [0.0] * pad, k) == top_k_steps(v, k)


class TestF1:
    def test_examples(self):
        assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0
        assert f1_score([1, 1, 1, 0], [1, 0, 1, 0]) == pytest.approx(0.8)

    def test_degenerate(self):
        assert f1_score([0, 0], [0, 0]) == 1.0
        assert f1_score([1, 0], [0, 0]) == 0.0
        assert f1_score([0, 0], [0, 1]) == 0.0

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
    def test_symmetric_even_when_precision_differs_from_recall(self, pairs):
        # 2tp / (|pred| + |gt|) does not care which side is which
        pred = [p for p, _ in pairs]
        gt = [g for _, g in pairs]
        assert f1_score(pred, gt) == f1_score(gt, pred)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            f1_score([1, 0], [1])

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
    def test_matches_counting_oracle(self, pairs):
        pred = [p for p, _ in pairs]
        gt = [g for _, g in pairs]
        tp = sum(p and g for p, g in pairs)
        fp = sum(p and not g for p, g in pairs)
        fn = sum(g and not p for p, g in pairs)
        if tp + fp + fn == 0:
            expected = 1.0
        elif tp == 0:
            expected = 0.0
        else:
            prec, rec = tp / (tp + fp), tp / (tp + fn)
            expected = 2 * prec * rec / (prec + rec)
        assert f1_score(pred, gt) == pytest.approx(expected)


class TestSuite:
    def test_all_ones_mask(self, small_set, nets):
        G, _ = nets
        ones = [np.ones(e.n_valid) for e in small_set.episodes]
        rep = eval_suite(G, None, small_set, masks=ones)
        assert rep.masked_acc == rep.clean_acc
        assert rep.l1_mask == pytest.approx(np.mean([e.n_valid for e in small_set.episodes]))
        assert rep.var_mask == 0

    def test_deterministic(self, small_set, nets):
        G, D = nets
        a = eval_suite(G, D, small_set)
        b = eval_suite(G, D, small_set)
        assert a.to_dict() == b.to_dict()
        assert 0 <= a.clean_acc <= 100 and 0 <= a.f1 <= 1

    def test_detect_lengths(self, small_set, nets):
        _, D = nets
        masks = detect(D, small_set)
        assert [len(m) for m in masks] == [e.n_valid for e in small_set.episodes]
        assert all(((m > 0) & (m < 1)).all() for m in masks)

    def test_perfect_masks_score_one(self, small_set):
        masks = [annotate_critical(e).astype(float) for e in small_set.episodes]
        assert detection_f1(masks, small_set) == 1.0

    def test_report_shape(self):
        rep = EvalReport(90.0, 89.0, 55.0, 12.0, 0.05, 0.8)
        assert set(rep.to_dict()) >= {"clean_acc", "masked_acc", "rmasked_acc", "l1_mask", "var_mask", "f1"}


class TestCategories:
    def test_pools_cover_states(self, small_set):
        masks = [np.full(e.n_valid, 0.5) for e in small_set.episodes]
        pools = category_values(masks, small_set)
        assert set(pools) == set(CATEGORIES)
        assert len(pools["normal"]) == len(pools["normal_before_key"]) + len(pools["normal_after_key"])
        assert all(v == 50.0 for pool in pools.values() for v in pool)

    def test_untrained_detector_is_flat(self, small_set, nets):
        rep = category_report(nets[1], small_set)
        means = [rep.mean(c) for c in CATEGORIES if rep.mean(c) is not None]
        assert max(means) - min(means) < 5
        assert "absent" in rep.table() or len(means) == len(CATEGORIES)

    def test_event_masks_rank_events_first(self, small_set):
        masks = [0.1 + 0.8 * annotate_critical(e) for e in small_set.episodes]
        rep = category_report(masks, small_set)
        assert rep.mean("pickup_key") > rep.mean("normal")

    def test_multi_seed_pooling(self, small_set):
        a = [np.full(e.n_valid, 0.2) for e in small_set.episodes]
        b = [np.full(e.n_valid, 0.4) for e in small_set.episodes]
        rep = category_report([a, b], small_set)
        assert rep.mean("normal") == pytest.approx(30.0)


class TestAblation:
    def test_unstable_flagging(self):
        rows = [
            AblationRow(("imp", "com", "rev"), [0.8, 0.81, 0.79], []),
            AblationRow(("imp", "com"), [0.2, 0.8, 0.5], []),
            AblationRow(("imp",), [0.7, 0.7, 0.7], []),
        ]
        assert unstable_combinations(rows) == [("imp", "com")]
        assert rows[0].median_f1 == 0.8

    def test_run_and_traces(self, small_set, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=6)
        rows = ablation_run(small_set, small_set, tiny_spec(dtype="float32"), cfg,
                            combinations=(("imp",), ("imp", "com", "rev")), seeds=(0,), trace_dir=tmp_path)
        assert [r.flags for r in rows] == [("imp",), ("imp", "com", "rev")]
        assert all(len(r.f1) == 1 for r in rows)
        assert (tmp_path / "imp_seed0.csv").exists()
        assert "median F1" in ablation_table(rows)

    def test_empty_flags_rejected(self, small_set):
        with pytest.raises(ValueError):
            ablation_run(small_set, small_set, tiny_spec(), TrainConfig(epochs=1), combinations=((),), seeds=(0,))


def test_trace_outputs(small_set, tmp_path):
    e = small_set.episodes[0]
    m = np.linspace(0, 1, e.n_valid)
    write_traces(tmp_path / "t.csv", [m], [e])
    rows = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert rows[0] == "episode,step,confidence,critical" and len(rows) == e.n_valid + 1
    plot_trace(tmp_path / "t.png", m, e, title="trace")
    assert (tmp_path / "t.png").stat().st_size > 0


def test_detector_output_uses_eval_mode(small_set, nets):
    _, D = nets
    D.train()
    detect(D, small_set)
    assert not D.training
    assert torch.is_grad_enabled()
