"""Predictor/detector losses and the alternating two-optimizer training loop.

Per batch the detector is updated first (its loss flows through the
predictor, whose parameters stay frozen), then the predictor is updated on
the clean, unmasked episodes.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import CONTINUOUS, DISCRETE, Dataset, atomic_write_bytes
from .models import (
    ArchitectureSpec,
    NumericError,
    SequenceNet,
    init_params,
    tensors_from_bytes,
    tensors_to_bytes,
)

log = logging.getLogger(__name__)

CONFUSED_TARGET = "confused_target"
NEGATED_LOSS = "negated_loss"


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_r: float = 5e-3
    lambda_v: float = 2.0
    lambda_orth: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{k} must be a finite value >= 0, got {v}")

    @classmethod
    def from_flags(cls, flags, **kw) -> "LossWeights":
        """Zero the weights of the terms not listed in ``flags`` (subset of imp/com/rev)."""
        flags = set(flags)
        if not flags:
            raise ValueError("at least one loss term is required")
        unknown = flags - {"imp", "com", "rev"}
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        base = cls(**kw)
        return cls(
            lambda_s=base.lambda_s if "imp" in flags else 0.0,
            lambda_r=base.lambda_r if "com" in flags else 0.0,
            lambda_v=base.lambda_v if "rev" in flags else 0.0,
            lambda_orth=base.lambda_orth,
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    reverse_mode: str | None = None  # None picks per label kind
    label_kind: str = DISCRETE
    reverse_clamp: float = -10.0
    clip_norm: float | None = None  # None: 10 for negated_loss, off otherwise

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.label_kind not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if self.reverse_mode not in (None, CONFUSED_TARGET, NEGATED_LOSS):
            raise ValueError(f"unknown reverse mode {self.reverse_mode!r}")
        if self.resolved_reverse_mode == CONFUSED_TARGET and self.label_kind == CONTINUOUS:
            raise ValueError("confused_target reverse loss needs discrete labels")

    @property
    def resolved_reverse_mode(self) -> str:
        if self.reverse_mode is not None:
            return self.reverse_mode
        return CONFUSED_TARGET if self.label_kind == DISCRETE else NEGATED_LOSS

    @property
    def resolved_clip_norm(self) -> float | None:
        if self.clip_norm is not None:
            return self.clip_norm
        return 10.0 if self.resolved_reverse_mode == NEGATED_LOSS else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# --- batches ------------------------------------------------------------------------


@dataclass
class Batch:
    frames: torch.Tensor  # [B, T, H, W, C] float in [0, 1]
    valid: torch.Tensor  # [B, T] bool
    labels: torch.Tensor  # [B] long or float
    index: np.ndarray  # dataset positions


class PackedEpisodes:
    """A dataset packed once into padded uint8 storage for fast batch slicing."""

    def __init__(self, dataset: Dataset, labels=None):
        eps = dataset.episodes
        if not eps:
            raise ValueError("dataset is empty")
        lengths = np.array([e.n_valid for e in eps])
        T = int(lengths.max())
        H, W, C = dataset.frame_shape
        frames = np.zeros((len(eps), T, H, W, C), np.uint8)
        for i, e in enumerate(eps):
            frames[i, : lengths[i]] = e.frames[: lengths[i]]
        self.frames = torch.from_numpy(frames)
        self.lengths = torch.from_numpy(lengths)
        y = dataset.labels if labels is None else np.asarray(labels)
        if dataset.label_kind == DISCRETE or labels is not None and np.issubdtype(np.asarray(y).dtype, np.integer):
            self.labels = torch.as_tensor(np.asarray(y, np.int64))
        else:
            self.labels = torch.as_tensor(np.asarray(y, np.float64))
        self.label_kind = dataset.label_kind

    def __len__(self):
        return len(self.lengths)

    def batch(self, index, dtype=torch.float32) -> Batch:
        index = np.asarray(index)
        idx = torch.from_numpy(index)
        lengths = self.lengths[idx]
        T = int(lengths.max())
        frames = self.frames[idx, :T].to(dtype) / 255.0
        valid = torch.arange(T)[None, :] < lengths[:, None]
        labels = self.labels[idx]
        if labels.is_floating_point():
            labels = labels.to(dtype)
        return Batch(frames, valid, labels, index)

    def iter_batches(self, batch_size: int, rng: np.random.Generator | None = None, dtype=torch.float32):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size], dtype)


# --- losses -------------------------------------------------------------------------


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")


def loss_predictor_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_finite("logits", logits)
    return F.cross_entropy(logits, labels.long())


def loss_predictor_reg(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the (unsquared) L2 distance."""
    _check_finite("predictions", preds)
    diff = (preds - targets.to(preds.dtype)).reshape(len(preds), -1)
    return diff.norm(dim=1).mean()


def predictor_loss(out: torch.Tensor, labels: torch.Tensor, label_kind: str) -> torch.Tensor:
    if label_kind == DISCRETE:
        return loss_predictor_ce(out, labels)
    return loss_predictor_reg(out, labels)


def masked_frames(frames: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return frames * masks.to(frames.dtype)[:, :, None, None, None]


def loss_importance(G: SequenceNet, masks, frames, valid, labels, label_kind=DISCRETE) -> torch.Tensor:
    return predictor_loss(G(masked_frames(frames, masks), valid), labels, label_kind)


def loss_compactness(masks: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    if valid is not None:
        masks = masks * valid.to(masks.dtype)
    return masks.abs().sum() / masks.shape[0]


def loss_reverse(
    G: SequenceNet,
    masks,
    frames,
    valid,
    labels,
    mode: str = CONFUSED_TARGET,
    label_kind: str = DISCRETE,
    clamp: float = -10.0,
) -> torch.Tensor:
    out = G(masked_frames(frames, 1.0 - masks), valid)
    if mode == CONFUSED_TARGET:
        if label_kind != DISCRETE:
            raise ValueError("confused_target reverse loss needs discrete labels")
        _check_finite("logits", out)
        return -F.log_softmax(out, dim=-1).mean(dim=-1).mean()
    if mode == NEGATED_LOSS:
        if label_kind == DISCRETE:
            per = F.cross_entropy(out, labels.long(), reduction="none")
        else:
            per = (out - labels.to(out.dtype)).reshape(len(out), -1).norm(dim=1)
        return torch.clamp(-per, min=clamp).mean()
    raise ValueError(f"unknown reverse mode {mode!r}")


def ortho_penalty(M: torch.Tensor) -> torch.Tensor:
    """Mean absolute off-diagonal entry of ``M @ M.T``."""
    b = M.shape[0]
    if b < 2:
        return M.sum() * 0.0
    gram = M @ M.T
    off = gram - torch.diag(torch.diagonal(gram))
    return off.abs().sum() / (b * (b - 1))


def loss_detector_total(w: LossWeights, parts: dict):
    total = w.lambda_s * parts["imp"] + w.lambda_r * parts["com"] + w.lambda_v * parts["rev"]
    if w.lambda_orth:
        total = total + w.lambda_orth * parts["orth"]
    return total


# --- steps --------------------------------------------------------------------------


class _frozen:
    """Temporarily stop gradient accumulation into a module's parameters."""

    def __init__(self, net):
        self.params = list(net.parameters())

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, f in zip(self.params, self.flags):
            p.requires_grad_(f)


def make_optimizer(net: SequenceNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        net.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, weight_decay=cfg.weight_decay
    )


def detector_parts(G, D, batch: Batch, w: LossWeights, cfg: TrainConfig) -> dict:
    masks = D(batch.frames, batch.valid)
    parts = {"masks": masks}
    zero = masks.sum() * 0.0
    need_imp = w.lambda_s > 0
    need_rev = w.lambda_v > 0
    parts["imp"] = (
        loss_importance(G, masks, batch.frames, batch.valid, batch.labels, cfg.label_kind) if need_imp else zero
    )
    parts["com"] = loss_compactness(masks, batch.valid)
    parts["rev"] = (
        loss_reverse(
            G, masks, batch.frames, batch.valid, batch.labels,
            cfg.resolved_reverse_mode, cfg.label_kind, cfg.reverse_clamp,
        )
        if need_rev
        else zero
    )
    parts["orth"] = ortho_penalty(masks) if w.lambda_orth else zero
    parts["total"] = loss_detector_total(w, parts)
    return parts


def _mask_stats(masks, valid) -> tuple[float, float]:
    means, variances = [], []
    for m, v in zip(masks.detach(), valid):
        x = m[v].double()
        means.append(x.mean().item())
        variances.append(x.var(unbiased=False).item())
    return float(np.mean(means)), float(np.mean(variances))


def detector_step(G, D, batch: Batch, w: LossWeights, opt_D, cfg: TrainConfig, batch_index: int = 0) -> dict:
    """One update of D on ``w``-weighted detector loss; G is left untouched."""
    G.eval()
    D.train()
    opt_D.zero_grad(set_to_none=True)
    with _frozen(G):
        try:
            parts = detector_parts(G, D, batch, w, cfg)
        except NumericError as exc:
            raise NumericError(f"detector step at batch {batch_index}: {exc}") from exc
        total = parts["total"]
        if not torch.isfinite(total):
            raise NumericError(f"non-finite detector loss at batch {batch_index}: "
                               + ", ".join(f"{k}={parts[k].item()}" for k in ("imp", "com", "rev", "orth")))
        total.backward()
    clip = cfg.resolved_clip_norm
    if clip is not None:
        torch.nn.utils.clip_grad_norm_(D.parameters(), clip)
    opt_D.step()
    mean, var = _mask_stats(parts["masks"], batch.valid)
    return {
        "imp": parts["imp"].item(),
        "com": parts["com"].item(),
        "rev": parts["rev"].item(),
        "orth": parts["orth"].item(),
        "total": total.item(),
        "mask_mean": mean,
        "mask_var": var,
    }


def predictor_step(G, batch: Batch, opt_G, cfg: TrainConfig, batch_index: int = 0) -> float:
    """One update of G on the clean episodes."""
    G.train()
    opt_G.zero_grad(set_to_none=True)
    try:
        loss = predictor_loss(G(batch.frames, batch.valid), batch.labels, cfg.label_kind)
    except NumericError as exc:
        raise NumericError(f"predictor step at batch {batch_index}: {exc}") from exc
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite predictor loss at batch {batch_index}")
    loss.backward()
    opt_G.step()
    return loss.item()


# --- checkpoints --------------------------------------------------------------------


def _optimizer_tensors(prefix: str, opt) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            t = v if torch.is_tensor(v) else torch.tensor(v)
            tensors[f"{prefix}.{pid}.{k}"] = t
    return tensors, {"param_groups": sd["param_groups"]}


def _optimizer_state(prefix: str, tensors: dict, meta: dict) -> dict:
    state: dict = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, pid, k = name.split(".", 2)
        state.setdefault(int(pid), {})[k] = t
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(path, G, D, opt_G=None, opt_D=None, epoch: int = 0, step: int = 0, extra=None) -> None:
    tensors = {f"G.{k}": v for k, v in G.state_dict().items()}
    tensors.update({f"D.{k}": v for k, v in D.state_dict().items()})
    meta = {
        "kind": "training_checkpoint",
        "predictor_spec": G.spec.to_dict(),
        "detector_spec": D.spec.to_dict(),
        "epoch": int(epoch),
        "step": int(step),
        "extra": extra or {},
    }
    if opt_G is not None:
        t, m = _optimizer_tensors("optG", opt_G)
        tensors.update(t)
        meta["optG"] = m
    if opt_D is not None:
        t, m = _optimizer_tensors("optD", opt_D)
        tensors.update(t)
        meta["optD"] = m
    atomic_write_bytes(path, tensors_to_bytes(tensors, meta))


def load_checkpoint(path) -> dict:
    """Returns ``{"G", "D", "meta", "optG", "optD"}`` (optimizer states may be None)."""
    tensors, meta = tensors_from_bytes(Path(path).read_bytes())
    G = SequenceNet(ArchitectureSpec.from_dict(meta["predictor_spec"]))
    D = SequenceNet(ArchitectureSpec.from_dict(meta["detector_spec"]))
    G.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("G.")})
    D.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("D.")})
    return {
        "G": G,
        "D": D,
        "meta": meta,
        "optG": _optimizer_state("optG", tensors, meta["optG"]) if "optG" in meta else None,
        "optD": _optimizer_state("optD", tensors, meta["optD"]) if "optD" in meta else None,
    }


# --- loop ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    G: SequenceNet
    D: SequenceNet
    history: list = field(default_factory=list)
    epochs: list = field(default_factory=list)


def train(
    dataset: Dataset,
    spec: ArchitectureSpec,
    cfg: TrainConfig,
    w: LossWeights = LossWeights(),
    out_dir=None,
    resume_from=None,
    labels=None,
    callback=None,
) -> TrainResult:
    """Alternate detector and predictor updates over ``cfg.epochs`` epochs.

    ``spec`` describes the predictor; the detector shares its body with a
    per-step sigmoid head. With ``out_dir`` a checkpoint is written after every
    epoch; ``resume_from`` continues from such a checkpoint.
    """
    packed = PackedEpisodes(dataset, labels)
    if labels is None and dataset.label_kind != cfg.label_kind:
        raise ValueError(f"dataset labels are {dataset.label_kind}, config expects {cfg.label_kind}")
    dtype = spec.torch_dtype
    start_epoch, step = 0, 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        G, D = ck["G"], ck["D"]
        start_epoch = ck["meta"]["epoch"]
        step = ck["meta"]["step"]
    else:
        G = init_params(spec, cfg.seed * 2 + 1)
        D = init_params(spec.detector(), cfg.seed * 2 + 2)
    opt_G = make_optimizer(G, cfg)
    opt_D = make_optimizer(D, cfg)
    if resume_from is not None and ck["optG"] is not None:
        opt_G.load_state_dict(ck["optG"])
        opt_D.load_state_dict(ck["optD"])

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    result = TrainResult(G, D)
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        rows = []
        for bi, batch in enumerate(packed.iter_batches(cfg.batch_size, rng, dtype)):
            row = {"epoch": epoch, "step": step}
            row.update(detector_step(G, D, batch, w, opt_D, cfg, bi))
            row["pred"] = predictor_step(G, batch, opt_G, cfg, bi)
            rows.append(row)
            step += 1
        summary = {"epoch": epoch, "step": step}
        for k in ("pred", "imp", "com", "rev", "orth", "total", "mask_mean", "mask_var"):
            summary[k] = float(np.mean([r[k] for r in rows]))
        log.info("epoch %d %s", epoch, json.dumps({k: round(v, 5) for k, v in summary.items() if isinstance(v, float)}))
        result.history.extend(rows)
        result.epochs.append(summary)
        if out_dir is not None:
            path = Path(out_dir) / f"checkpoint_epoch{epoch:03d}.dsi"
            save_checkpoint(path, G, D, opt_G, opt_D, epoch + 1, step)
        if callback is not None:
            callback(epoch, G, D, summary)
    G.eval()
    D.eval()
    return result
