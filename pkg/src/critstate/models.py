"""Return predictor and critical-state detector networks.

Two architectures are available:

* ``frame_recurrent`` -- a per-frame conv encoder (3 -> 32 -> 64 -> 128 -> 128
  -> 256, normalisation on the 2nd and 4th conv) feeding a bidirectional LSTM
  (hidden 128, 256 features per step).
* ``windowed_3dconv`` -- a 3D conv stack over non-overlapping 12-frame windows.

Predictor heads pool over valid steps (or flatten a fixed length) and emit K
logits or one regression value; detector heads emit one sigmoid confidence per
step with padded steps forced to 0.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .core import MAGIC, DatasetFormatError, atomic_write_bytes

FRAME_RECURRENT = "frame_recurrent"
WINDOWED_3DCONV = "windowed_3dconv"
CLASSIFIER = "classifier"
REGRESSOR = "regressor"
PER_STEP_SIGMOID = "per_step_sigmoid"


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str = FRAME_RECURRENT
    head: str = CLASSIFIER
    n_classes: int = 2
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128, 128, 256)
    norm_pattern: tuple[bool, ...] = (False, True, False, True, False)
    norm: str = "group"
    bias: bool = True
    hidden: int = 128
    bidirectional: bool = True
    pool: str = "mean"
    fixed_length: int | None = None
    window: int = 12
    fc_hidden: int = 512
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "norm_pattern", tuple(bool(x) for x in self.norm_pattern))
        if self.kind not in (FRAME_RECURRENT, WINDOWED_3DCONV):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.head not in (CLASSIFIER, REGRESSOR, PER_STEP_SIGMOID):
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.channels) != 5 or len(self.norm_pattern) != 5:
            raise ValueError("the encoder has exactly five conv layers")
        if self.norm not in ("group", "none"):
            raise ValueError("norm must be 'group' or 'none'")
        if self.pool not in ("mean", "flatten"):
            raise ValueError("pool must be 'mean' or 'flatten'")
        if self.pool == "flatten" and not self.fixed_length:
            raise ValueError("flatten pooling needs fixed_length")
        if self.kind == WINDOWED_3DCONV and self.window != 12:
            raise ValueError("windowed_3dconv uses 12-frame windows")
        if self.head == CLASSIFIER and self.n_classes < 2:
            raise ValueError("classifier needs n_classes >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def out_dim(self) -> int:
        if self.head == CLASSIFIER:
            return self.n_classes
        return 1

    def detector(self) -> "ArchitectureSpec":
        return replace(self, head=PER_STEP_SIGMOID)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["norm_pattern"] = list(self.norm_pattern)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def tiny_spec(**overrides) -> ArchitectureSpec:
    """Quarter-width float64 variant used for gradient checks."""
    base = dict(channels=(8, 16, 32, 32, 64), hidden=32, fc_hidden=128, dtype="float64")
    base.update(overrides)
    return ArchitectureSpec(**base)


def _norm(spec: "ArchitectureSpec", channels: int) -> nn.Module:
    if spec.norm == "none":
        return nn.Identity()
    return nn.GroupNorm(math.gcd(8, channels), channels)


class FrameEncoder(nn.Module):
    """Per-frame 2D conv stack -> global average pool."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        c = (spec.in_channels,) + spec.channels
        kernels = (3, 3, 3, 3, 2)
        strides = (2, 1, 2, 1, 1)
        pads = (1, 1, 1, 1, 0)
        layers = []
        for i in range(5):
            layers.append(nn.Conv2d(c[i], c[i + 1], kernels[i], strides[i], pads[i], bias=spec.bias))
            if spec.norm_pattern[i]:
                layers.append(_norm(spec, c[i + 1]))
            layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.out_dim = c[-1]

    def forward(self, x):  # [N, C, H, W]
        return self.net(x).mean(dim=(2, 3))


class VolumeEncoder(nn.Module):
    """3D conv stack over a ``[N, C, 12, H, W]`` window -> pooled features."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        c = (spec.in_channels,) + spec.channels
        kernels = ((1, 3, 3), (1, 3, 3), (1, 3, 3), (1, 3, 3), (3, 2, 2))
        strides = ((1, 2, 2), (1, 1, 1), (1, 2, 2), (1, 1, 1), (1, 1, 1))
        pads = ((0, 1, 1), (0, 1, 1), (0, 1, 1), (0, 1, 1), (1, 0, 0))
        layers = []
        for i in range(5):
            layers.append(nn.Conv3d(c[i], c[i + 1], kernels[i], strides[i], pads[i], bias=spec.bias))
            if spec.norm_pattern[i]:
                layers.append(_norm(spec, c[i + 1]))
            layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.out_dim = c[-1]

    def forward(self, x):
        return self.net(x).mean(dim=(2, 3, 4))


def lengths_from_valid(valid: torch.Tensor) -> torch.Tensor:
    lengths = valid.sum(dim=1)
    if torch.any(lengths < 1):
        raise ValueError("every sequence needs at least one valid step")
    idx = torch.arange(valid.shape[1], device=valid.device)
    if not torch.equal(valid.bool(), idx[None, :] < lengths[:, None]):
        raise ValueError("valid flags must form a prefix (padding only at the tail)")
    return lengths


class SequenceNet(nn.Module):
    """Shared body for both roles; the head decides predictor vs detector."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        if spec.kind == FRAME_RECURRENT:
            self.encoder = FrameEncoder(spec)
            self.rnn = nn.LSTM(
                self.encoder.out_dim, spec.hidden, batch_first=True, bidirectional=spec.bidirectional, bias=spec.bias
            )
            feat = spec.hidden * (2 if spec.bidirectional else 1)
            if spec.head == PER_STEP_SIGMOID:
                # the detector keeps its output bias so it can shift the mask level
                self.head = nn.Linear(feat, 1)
            elif spec.pool == "flatten":
                self.head = nn.Linear(feat * spec.fixed_length, spec.out_dim, bias=spec.bias)
            else:
                self.head = nn.Linear(feat, spec.out_dim, bias=spec.bias)
        else:
            self.encoder = VolumeEncoder(spec)
            out = spec.window if spec.head == PER_STEP_SIGMOID else spec.out_dim
            last_bias = spec.bias or spec.head == PER_STEP_SIGMOID
            self.head = nn.Sequential(
                nn.Linear(self.encoder.out_dim, spec.fc_hidden, bias=spec.bias),
                nn.ReLU(),
                nn.Linear(spec.fc_hidden, out, bias=last_bias),
            )
        self.to(spec.torch_dtype)

    # frames: [B, T, H, W, C] in [0, 1]; valid: [B, T] bool
    def forward(self, frames: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        if frames.ndim != 5 or frames.shape[-1] != self.spec.in_channels:
            raise ValueError(f"expected frames [B,T,H,W,{self.spec.in_channels}], got {tuple(frames.shape)}")
        B, T = frames.shape[:2]
        if valid is None:
            valid = torch.ones(B, T, dtype=torch.bool)
        if valid.shape != (B, T):
            raise ValueError(f"valid flags {tuple(valid.shape)} do not match frames {(B, T)}")
        valid = valid.bool()
        lengths = lengths_from_valid(valid)
        frames = frames.to(self.spec.torch_dtype)
        if self.spec.kind == FRAME_RECURRENT:
            return self._forward_recurrent(frames, valid, lengths)
        return self._forward_windows(frames, valid, lengths)

    def _forward_recurrent(self, frames, valid, lengths):
        B, T, H, W, C = frames.shape
        x = frames.reshape(B * T, H, W, C).permute(0, 3, 1, 2)
        feats = self.encoder(x).reshape(B, T, -1)
        packed = pack_padded_sequence(feats, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        vf = valid.to(out.dtype).unsqueeze(-1)
        if self.spec.head == PER_STEP_SIGMOID:
            return torch.sigmoid(self.head(out).squeeze(-1)) * valid.to(out.dtype)
        if self.spec.pool == "flatten":
            L = self.spec.fixed_length
            if T > L:
                raise ValueError(f"sequence length {T} exceeds fixed_length {L}")
            out = F.pad(out * vf, (0, 0, 0, L - T))
            y = self.head(out.reshape(B, -1))
        else:
            pooled = (out * vf).sum(1) / lengths.to(out.dtype).unsqueeze(-1)
            y = self.head(pooled)
        return y.squeeze(-1) if self.spec.head == REGRESSOR else y

    def _forward_windows(self, frames, valid, lengths):
        B, T, H, W, C = frames.shape
        L = self.spec.window
        nwin = -(-T // L)
        pad = nwin * L - T
        x = F.pad(frames * valid.to(frames.dtype)[..., None, None, None], (0, 0, 0, 0, 0, 0, 0, pad))
        vpad = F.pad(valid, (0, pad))
        x = x.reshape(B, nwin, L, H, W, C).permute(0, 1, 5, 2, 3, 4).reshape(B * nwin, C, L, H, W)
        feats = self.encoder(x)
        out = self.head(feats).reshape(B, nwin, -1)
        if self.spec.head == PER_STEP_SIGMOID:
            m = torch.sigmoid(out).reshape(B, nwin * L)[:, :T]
            return m * valid.to(m.dtype)
        wvalid = vpad.reshape(B, nwin, L).any(-1).to(out.dtype).unsqueeze(-1)
        y = (out * wvalid).sum(1) / wvalid.sum(1)
        return y.squeeze(-1) if self.spec.head == REGRESSOR else y


def init_params(spec: ArchitectureSpec, seed: int) -> SequenceNet:
    """Build a network with a deterministic initialisation.

    Conv/linear weights and biases are uniform in +-1/sqrt(fan_in); LSTM
    input weights likewise, recurrent weights orthogonal per gate, forget-gate
    bias 1. Normalisation layers start at scale 1, shift 0.

    Nonzero conv biases matter: with zero biases the first (unnormalised)
    conv is positively homogeneous and the following GroupNorm cancels any
    per-frame scale, so a mask in (0, 1] would have no effect on the output.
    """
    gen = torch.Generator().manual_seed(int(seed))
    net = SequenceNet(spec)
    norms = {n for n, m in net.named_modules() if isinstance(m, nn.GroupNorm)}
    with torch.no_grad():
        for name, p in net.named_parameters():
            owner, _, leaf = name.rpartition(".")
            if name.startswith("rnn."):
                _init_lstm_param(name, p, spec.hidden, gen)
            elif owner in norms:
                p.fill_(1.0 if leaf == "weight" else 0.0)
            else:
                weight = net.get_submodule(owner).weight
                bound = 1.0 / math.sqrt(weight[0].numel())
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return net


def _init_lstm_param(name: str, p: torch.Tensor, hidden: int, gen: torch.Generator) -> None:
    if "weight_hh" in name:
        blocks = []
        for _ in range(4):
            a = torch.randn(hidden, hidden, generator=gen, dtype=torch.float64)
            q, r = torch.linalg.qr(a)
            q = q * torch.sign(torch.diagonal(r))
            blocks.append(q)
        p.copy_(torch.cat(blocks, 0))
    elif "weight_ih" in name:
        bound = 1.0 / math.sqrt(p.shape[1])
        p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    elif "bias_ih" in name:
        p.zero_()
        p[hidden : 2 * hidden] = 1.0
    else:
        p.zero_()


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def expected_parameter_count(spec: ArchitectureSpec) -> int:
    """Closed-form parameter count of ``SequenceNet(spec)``."""
    c = (spec.in_channels,) + spec.channels
    if spec.kind == FRAME_RECURRENT:
        kernels = (9, 9, 9, 9, 4)
    else:
        kernels = (9, 9, 9, 9, 12)
    b = 1 if spec.bias else 0
    total = 0
    for i in range(5):
        total += c[i] * c[i + 1] * kernels[i] + b * c[i + 1]
        if spec.norm_pattern[i] and spec.norm != "none":
            total += 2 * c[i + 1]
    if spec.kind == FRAME_RECURRENT:
        dirs = 2 if spec.bidirectional else 1
        h = spec.hidden
        total += dirs * (4 * h * c[-1] + 4 * h * h + b * 8 * h)
        feat = dirs * h
        if spec.head == PER_STEP_SIGMOID:
            total += feat + 1
        elif spec.pool == "flatten":
            total += feat * spec.fixed_length * spec.out_dim + b * spec.out_dim
        else:
            total += feat * spec.out_dim + b * spec.out_dim
    else:
        out = spec.window if spec.head == PER_STEP_SIGMOID else spec.out_dim
        last_b = 1 if (spec.bias or spec.head == PER_STEP_SIGMOID) else 0
        total += c[-1] * spec.fc_hidden + b * spec.fc_hidden + spec.fc_hidden * out + last_b * out
    return total


def predictor_forward(G: SequenceNet, frames, valid=None) -> torch.Tensor:
    if G.spec.head == PER_STEP_SIGMOID:
        raise ValueError("predictor needs a classifier or regressor head")
    return G(frames, valid)


def detector_forward(D: SequenceNet, frames, valid=None) -> torch.Tensor:
    if D.spec.head != PER_STEP_SIGMOID:
        raise ValueError("detector needs a per-step sigmoid head")
    return D(frames, valid)


def grad(loss_fn, params: nn.Module, *batch) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_fn(params, *batch)`` w.r.t. every parameter of ``params``."""
    named = [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    loss = loss_fn(params, *batch)
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite ({loss.item()}); parameters finite: "
                           f"{all(torch.isfinite(p).all().item() for _, p in named)}")
    gs = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, gs)}


# --- checkpoints --------------------------------------------------------------------


def _tensor_blocks(tensors: dict[str, torch.Tensor]):
    entries, blocks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        arr = t.numpy()
        dt = arr.dtype.newbyteorder("<")
        data = arr.astype(dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(data)})
        blocks.append(data)
        offset += len(data)
    return entries, blocks


def tensors_to_bytes(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    entries, blocks = _tensor_blocks(tensors)
    header = dict(meta, tensors=entries, version=1)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<I", len(hbytes)), hbytes] + blocks)


def tensors_from_bytes(buf: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}", 0)
    (hlen,) = struct.unpack("<I", buf[4:8])
    try:
        header = json.loads(buf[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable header: {exc}", 8) from exc
    base = 8 + hlen
    out = {}
    for e in header.pop("tensors"):
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise DatasetFormatError(f"tensor {e['name']} runs past end of file", start)
        arr = np.frombuffer(buf, np.dtype(e["dtype"]), int(np.prod(e["shape"])), start).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    return out, header


def save_params(net: SequenceNet, path, step: int = 0, extra: dict | None = None) -> None:
    meta = {"kind": "params", "spec": net.spec.to_dict(), "step": int(step), "extra": extra or {}}
    atomic_write_bytes(path, tensors_to_bytes(net.state_dict(), meta))


def load_params(path) -> tuple[SequenceNet, dict]:
    tensors, meta = tensors_from_bytes(Path(path).read_bytes())
    spec = ArchitectureSpec.from_dict(meta["spec"])
    net = SequenceNet(spec)
    net.load_state_dict(tensors)
    return net, meta
