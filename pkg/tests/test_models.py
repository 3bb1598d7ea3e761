import numpy as np
import pytest
import torch

from critstate.models import (
    ArchitectureSpec,
    NumericError,
    SequenceNet,
    detector_forward,
    expected_parameter_count,
    grad,
    init_params,
    load_params,
    parameter_count,
    predictor_forward,
    save_params,
    tiny_spec,
)
from critstate.training import loss_compactness


def frames(B=2, T=5, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, T, 7, 7, 3, generator=g, dtype=dtype)


def fd_check(loss_fn, net, n_params=24, seed=0, h=1e-6):
    """Central differences on randomly chosen scalar parameters."""
    g = grad(loss_fn, net)
    rng = np.random.default_rng(seed)
    named = [(n, p) for n, p in net.named_parameters()]
    errors = []
    for _ in range(n_params):
        n, p = named[rng.integers(len(named))]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + h
            up = loss_fn(net).item()
            flat[i] = old - h
            down = loss_fn(net).item()
            flat[i] = old
        fd = (up - down) / (2 * h)
        auto = g[n].reshape(-1)[i].item()
        errors.append(abs(auto - fd) / (abs(fd) + 1e-8))
    return errors


class TestSpec:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ArchitectureSpec(kind="windowed_3dconv", window=8)
        with pytest.raises(ValueError):
            ArchitectureSpec(head="nope")

    def test_round_trip_dict(self):
        s = tiny_spec(kind="windowed_3dconv")
        assert ArchitectureSpec.from_dict(s.to_dict()) == s

    @pytest.mark.parametrize("kind", ["frame_recurrent", "windowed_3dconv"])
    @pytest.mark.parametrize("head", ["classifier", "regressor", "per_step_sigmoid"])
    @pytest.mark.parametrize("bias", [True, False])
    def test_parameter_count_closed_form(self, kind, head, bias):
        s = ArchitectureSpec(kind=kind, head=head, bias=bias)
        assert parameter_count(SequenceNet(s)) == expected_parameter_count(s)

    def test_reference_count(self):
        # conv ladder + biLSTM(256 -> 2x128) + linear(256 -> 2), written out by hand
        conv = (3 * 32 * 9 + 32) + (32 * 64 * 9 + 64 + 128) + (64 * 128 * 9 + 128)
        conv += (128 * 128 * 9 + 128 + 256) + (128 * 256 * 4 + 256)
        lstm = 2 * (4 * 128 * 256 + 4 * 128 * 128 + 8 * 128)
        assert parameter_count(SequenceNet(ArchitectureSpec())) == conv + lstm + 256 * 2 + 2


class TestInit:
    def test_same_seed_same_tensors(self):
        a = init_params(tiny_spec(), 3).state_dict()
        b = init_params(tiny_spec(), 3).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seed_differs(self):
        a = init_params(tiny_spec(), 3).state_dict()
        b = init_params(tiny_spec(), 4).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_finite_and_bounded(self):
        for p in init_params(ArchitectureSpec(), 0).parameters():
            assert torch.isfinite(p).all()
            assert p.abs().max() <= 1.0


class TestForward:
    def test_shapes_and_range(self):
        D = init_params(tiny_spec().detector(), 0).eval()
        for T in (1, 12, 40):
            m = detector_forward(D, frames(2, T))
            assert m.shape == (2, T)
            assert ((m > 0) & (m < 1)).all()

    def test_padded_tail_zero(self):
        D = init_params(tiny_spec().detector(), 0).eval()
        valid = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
        m = D(frames(2, 5), valid)
        assert (m[0, 3:] == 0).all()

    @pytest.mark.parametrize("kind", ["frame_recurrent", "windowed_3dconv"])
    def test_padding_does_not_leak(self, kind):
        spec = tiny_spec(kind=kind)
        G = init_params(spec, 1).eval()
        D = init_params(spec.detector(), 2).eval()
        x = frames(1, 14)
        short = torch.ones(1, 14, dtype=torch.bool)
        padded = torch.cat([x, torch.rand(1, 9, 7, 7, 3, dtype=torch.float64)], 1)
        valid = torch.cat([short, torch.zeros(1, 9, dtype=torch.bool)], 1)
        with torch.no_grad():
            torch.testing.assert_close(D(padded, valid)[:, :14], D(x, short))
            torch.testing.assert_close(G(padded, valid), G(x, short))

    def test_duplicates_and_permutation(self):
        G = init_params(tiny_spec(), 0).eval()
        x = frames(3, 4)
        x[2] = x[0]
        with torch.no_grad():
            out = predictor_forward(G, x)
            torch.testing.assert_close(out[0], out[2])
            perm = predictor_forward(G, x[[1, 0, 2]])
        torch.testing.assert_close(perm, out[[1, 0, 2]])

    def test_zero_input_finite(self):
        G = init_params(tiny_spec(), 0).eval()
        assert torch.isfinite(G(torch.zeros(1, 3, 7, 7, 3, dtype=torch.float64))).all()

    def test_bias_free_predictor_is_uniform_on_zeros(self):
        G = init_params(tiny_spec(bias=False), 0).eval()
        out = G(torch.zeros(2, 3, 7, 7, 3, dtype=torch.float64))
        torch.testing.assert_close(out, torch.zeros_like(out))

    def test_head_role_checked(self):
        G = init_params(tiny_spec(), 0)
        with pytest.raises(ValueError):
            detector_forward(G, frames(1, 2))
        with pytest.raises(ValueError):
            predictor_forward(init_params(tiny_spec().detector(), 0), frames(1, 2))

    def test_shape_mismatch(self):
        G = init_params(tiny_spec(), 0)
        with pytest.raises(ValueError):
            G(torch.zeros(1, 3, 7, 7, 3, dtype=torch.float64), torch.ones(1, 4, dtype=torch.bool))

    def test_non_prefix_valid_rejected(self):
        G = init_params(tiny_spec(), 0)
        with pytest.raises(ValueError):
            G(frames(1, 3), torch.tensor([[1, 0, 1]], dtype=torch.bool))


class TestGrad:
    def test_predictor_fd(self):
        G = init_params(tiny_spec(), 5).eval()
        x, y = frames(2, 4, seed=1), torch.tensor([0, 1])
        loss = lambda net: torch.nn.functional.cross_entropy(net(x), y)
        assert max(fd_check(loss, G)) < 1e-3

    def test_detector_fd(self):
        D = init_params(tiny_spec().detector(), 6).eval()
        x = frames(2, 4, seed=2)
        loss = lambda net: (net(x) ** 2).sum()
        assert max(fd_check(loss, D, seed=1)) < 1e-3

    def test_compactness_wrt_head_bias(self):
        D = init_params(tiny_spec().detector(), 0).eval()
        x = frames(1, 2, seed=3)
        loss = lambda net: loss_compactness(net(x))
        g = grad(loss, D)["head.bias"].item()
        h = 1e-6
        with torch.no_grad():
            D.head.bias += h
            up = loss(D).item()
            D.head.bias -= 2 * h
            down = loss(D).item()
            D.head.bias += h
        fd = (up - down) / (2 * h)
        assert abs(g - fd) / (abs(fd) + 1e-8) < 1e-3

    def test_zero_loss_zero_grad(self):
        G = init_params(tiny_spec(), 0)
        g = grad(lambda net: net(frames(1, 2)).sum() * 0.0, G)
        assert all((v == 0).all() for v in g.values())

    def test_non_finite_loss(self):
        G = init_params(tiny_spec(), 0)
        with pytest.raises(NumericError):
            grad(lambda net: net(frames(1, 2)).sum() * float("nan"), G)


def test_params_round_trip(tmp_path):
    G = init_params(tiny_spec(), 9)
    save_params(G, tmp_path / "g.dsi", step=12)
    back, meta = load_params(tmp_path / "g.dsi")
    assert meta["step"] == 12 and back.spec == G.spec
    sd = back.state_dict()
    assert all(torch.equal(sd[k], v) for k, v in G.state_dict().items())
