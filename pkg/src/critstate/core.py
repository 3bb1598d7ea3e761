"""Episode and dataset containers, return/mask arithmetic and the on-disk format.

The container format is a single file::

    b"DSI1" | uint32 LE header length | UTF-8 JSON header | raw tensor blocks

Tensor blocks are little-endian and addressed by offsets (relative to the end
of the header) stored per episode in the header.
"""
from __future__ import annotations

import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"DSI1"
FORMAT_VERSION = 1

DISCRETE = "discrete"
CONTINUOUS = "continuous"
LABEL_KINDS = (DISCRETE, CONTINUOUS)


class DatasetFormatError(ValueError):
    """Raised when a container file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Episode:
    """One recorded episode: frames, per-step rewards and a return label.

    ``events`` holds ``(time_index, kind)`` pairs where ``time_index`` is the
    first frame showing the event's effect. ``valid`` marks real (1) versus
    padded (0) steps; ``None`` means every step is real. ``actions`` optionally
    records the action taken at each frame (-1 where none was taken), which
    lets the episode be replayed from its seed.
    """

    frames: np.ndarray
    rewards: np.ndarray
    return_label: int | float
    policy_id: int = 0
    events: tuple[tuple[int, str], ...] = ()
    gamma: float = 0.99
    seed: int = 0
    valid: np.ndarray | None = None
    actions: np.ndarray | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.dtype != np.uint8 or frames.ndim != 4:
            raise ValueError(f"frames must be uint8 [T,H,W,C], got {frames.dtype} {frames.shape}")
        rewards = np.asarray(self.rewards, dtype=np.float64)
        T = frames.shape[0]
        if T < 1:
            raise ValueError("episode must contain at least one frame")
        if rewards.shape != (T,):
            raise ValueError(f"rewards length {rewards.shape} does not match T={T}")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        events = tuple((int(t), str(k)) for t, k in self.events)
        for t, _ in events:
            if not 0 <= t < T:
                raise ValueError(f"event time index {t} outside [0, {T})")
        if isinstance(self.return_label, float) and not math.isfinite(self.return_label):
            raise ValueError("return_label must be finite")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "rewards", _frozen(rewards))
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "seed", int(self.seed))
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != (T,):
                raise ValueError("valid flags must have length T")
            object.__setattr__(self, "valid", _frozen(valid))
        if self.actions is not None:
            actions = np.asarray(self.actions)
            if actions.shape != (T,) or not np.issubdtype(actions.dtype, np.integer):
                raise ValueError("actions must be an integer vector of length T")
            if actions.min() < -1 or actions.max() > 127:
                raise ValueError("actions must lie in [-1, 127]")
            object.__setattr__(self, "actions", _frozen(actions.astype(np.int8)))

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def n_valid(self) -> int:
        return self.T if self.valid is None else int(self.valid.sum())

    def validity(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.T, dtype=bool)
        return np.asarray(self.valid)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        same_valid = (self.valid is None and other.valid is None) or (
            self.valid is not None
            and other.valid is not None
            and np.array_equal(self.valid, other.valid)
        )
        return (
            np.array_equal(self.frames, other.frames)
            and self.rewards.tobytes() == other.rewards.tobytes()
            and type(self.return_label) is type(other.return_label)
            and self.return_label == other.return_label
            and self.policy_id == other.policy_id
            and self.events == other.events
            and self.gamma == other.gamma
            and self.seed == other.seed
            and same_valid
            and _same_optional(self.actions, other.actions)
        )

    __hash__ = None


@dataclass(frozen=True)
class Mask:
    """Per-step confidences in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("mask must be a vector")
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self):
        return self.values.shape[0]


def _same_optional(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def _mask_values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)


def compute_return(rewards: Sequence[float], gamma: float) -> float:
    """Discounted sum of rewards, the first reward undiscounted."""
    r = np.asarray(rewards, dtype=np.float64)
    if not (0.0 <= gamma <= 1.0) or not math.isfinite(gamma):
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    total = 0.0
    discount = 1.0
    for x in r:
        total += discount * float(x)
        discount *= gamma
    return total


def to_float_frames(frames: np.ndarray) -> np.ndarray:
    """uint8 frames -> float64 in [0, 1]."""
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(np.float64) / 255.0
    return frames.astype(np.float64)


def apply_mask(frames: np.ndarray, mask) -> np.ndarray:
    """Scale every frame by its mask value (frames are first mapped to [0, 1])."""
    m = _mask_values(mask)
    frames = to_float_frames(frames)
    if m.shape != (frames.shape[0],):
        raise ValueError(f"mask length {m.shape} does not match T={frames.shape[0]}")
    return frames * m.reshape((-1,) + (1,) * (frames.ndim - 1))


def invert_mask(mask) -> Mask:
    return Mask(1.0 - _mask_values(mask))


def pad_episode(e: Episode, length: int) -> Episode:
    """Append zero frames (reward 0) up to ``length``; padded steps are flagged invalid."""
    if length < e.T:
        raise ValueError(f"cannot pad an episode of length {e.T} to {length}; use truncate_episode")
    extra = length - e.T
    valid = np.concatenate([e.validity(), np.zeros(extra, dtype=bool)])
    if extra == 0:
        return replace(e, valid=valid)
    frames = np.concatenate([e.frames, np.zeros((extra,) + e.frames.shape[1:], np.uint8)])
    rewards = np.concatenate([e.rewards, np.zeros(extra)])
    actions = None if e.actions is None else np.concatenate([e.actions, np.full(extra, -1, np.int8)])
    return replace(e, frames=frames, rewards=rewards, valid=valid, actions=actions)


def truncate_episode(e: Episode, length: int) -> Episode:
    """Keep the first ``length`` steps; events past the cut are dropped."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if length >= e.T:
        return e
    valid = None if e.valid is None else e.valid[:length]
    actions = None if e.actions is None else e.actions[:length]
    events = tuple((t, k) for t, k in e.events if t < length)
    return replace(
        e, frames=e.frames[:length], rewards=e.rewards[:length], events=events, valid=valid, actions=actions
    )


def jitter_length(e: Episode, max_delta: int, rng: np.random.Generator) -> Episode:
    """Randomly lengthen (zero padding) or shorten an episode by up to ``max_delta`` steps."""
    delta = int(rng.integers(-max_delta, max_delta + 1))
    if delta >= 0:
        return pad_episode(e, e.T + delta)
    return truncate_episode(e, max(1, e.T + delta))


def _label_key(label) -> str:
    return str(label)


def count_labels(episodes: Iterable[Episode], label_kind: str) -> dict[str, int]:
    if label_kind == CONTINUOUS:
        return {"all": sum(1 for _ in episodes)}
    counts = Counter(_label_key(e.return_label) for e in episodes)
    return {k: counts[k] for k in sorted(counts)}


@dataclass(frozen=True, eq=False)
class Dataset:
    episodes: tuple[Episode, ...]
    label_kind: str = DISCRETE
    pad_length: int | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        episodes = tuple(self.episodes)
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label_kind must be one of {LABEL_KINDS}")
        shapes = {e.frames.shape[1:] for e in episodes}
        if len(shapes) > 1:
            raise ValueError(f"episodes disagree on frame shape: {sorted(shapes)}")
        for e in episodes:
            if self.label_kind == DISCRETE and not isinstance(e.return_label, (int, np.integer)):
                raise ValueError("discrete datasets need integer labels")
            if self.label_kind == DISCRETE and e.return_label < 0:
                raise ValueError("discrete labels must be >= 0")
        manifest = dict(self.manifest)
        counts = count_labels(episodes, self.label_kind)
        if "counts" in manifest and manifest["counts"] != counts:
            raise ValueError(f"manifest counts {manifest['counts']} disagree with episodes {counts}")
        manifest["counts"] = counts
        object.__setattr__(self, "episodes", episodes)
        object.__setattr__(self, "manifest", manifest)

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.label_kind == other.label_kind
            and self.pad_length == other.pad_length
            and self.manifest == other.manifest
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.episodes, other.episodes))
        )

    __hash__ = None

    @property
    def frame_shape(self) -> tuple[int, ...] | None:
        return self.episodes[0].frames.shape[1:] if self.episodes else None

    @property
    def labels(self) -> np.ndarray:
        dtype = np.int64 if self.label_kind == DISCRETE else np.float64
        return np.array([e.return_label for e in self.episodes], dtype=dtype)

    def subset(self, indices: Sequence[int], **manifest_updates) -> "Dataset":
        eps = tuple(self.episodes[i] for i in indices)
        manifest = {k: v for k, v in self.manifest.items() if k != "counts"}
        manifest.update(manifest_updates)
        return Dataset(eps, self.label_kind, self.pad_length, manifest)


def split_dataset(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified, seed-deterministic train/test split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    if d.label_kind == DISCRETE:
        keys = [_label_key(e.return_label) for e in d.episodes]
    else:
        keys = ["all"] * len(d)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for key in sorted(set(keys)):
        members = np.array([i for i, k in enumerate(keys) if k == key])
        if len(members) < 2:
            raise ValueError(f"class {key!r} has fewer than 2 episodes; cannot split")
        n_test = int(round(len(members) * test_fraction))
        n_test = min(max(n_test, 1), len(members) - 1)
        perm = members[rng.permutation(len(members))]
        test_idx.extend(perm[:n_test].tolist())
        train_idx.extend(perm[n_test:].tolist())
    return (
        d.subset(sorted(train_idx), split="train", split_seed=seed),
        d.subset(sorted(test_idx), split="test", split_seed=seed),
    )


def concat_datasets(parts: Sequence[Dataset], **manifest) -> Dataset:
    kinds = {p.label_kind for p in parts}
    if len(kinds) != 1:
        raise ValueError("cannot concatenate datasets with different label kinds")
    eps = tuple(e for p in parts for e in p.episodes)
    return Dataset(eps, kinds.pop(), None, manifest)


# --- container format -------------------------------------------------------------


def _episode_blocks(e: Episode) -> list[bytes]:
    blocks = [e.frames.tobytes(), e.rewards.astype("<f8").tobytes()]
    if e.valid is not None:
        blocks.append(e.valid.astype(np.uint8).tobytes())
    if e.actions is not None:
        blocks.append(e.actions.astype(np.int8).tobytes())
    return blocks


def dataset_to_bytes(d: Dataset) -> bytes:
    entries = []
    payload = []
    offset = 0
    for e in d.episodes:
        blocks = _episode_blocks(e)
        nbytes = sum(len(b) for b in blocks)
        label = int(e.return_label) if d.label_kind == DISCRETE else float(e.return_label)
        entries.append(
            {
                "T": e.T,
                "offset": offset,
                "nbytes": nbytes,
                "return_label": label,
                "policy_id": int(e.policy_id),
                "events": [[t, k] for t, k in e.events],
                "gamma": float(e.gamma),
                "seed": int(e.seed),
                "has_valid": e.valid is not None,
                "has_actions": e.actions is not None,
            }
        )
        payload.extend(blocks)
        offset += nbytes
    header = {
        "version": FORMAT_VERSION,
        "label_kind": d.label_kind,
        "pad_length": d.pad_length,
        "frame_shape": list(d.frame_shape) if d.frame_shape else None,
        "dtypes": {"frames": "uint8", "rewards": "<f8", "valid": "uint8", "actions": "int8"},
        "manifest": d.manifest,
        "episodes": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<I", len(hbytes)), hbytes] + payload)


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 8:
        raise DatasetFormatError("file too short for a container header", len(buf))
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise DatasetFormatError("header length exceeds file size", 4)
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable JSON header: {exc}", 8) from exc
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header.get('version')}", 8)
    base = 8 + hlen
    label_kind = header["label_kind"]
    shape = tuple(header["frame_shape"] or ())
    frame_size = int(np.prod(shape)) if shape else 0
    episodes = []
    for entry in header["episodes"]:
        T = entry["T"]
        start = base + entry["offset"]
        has_actions = entry.get("has_actions", False)
        expected = T * frame_size + 8 * T + (T if entry["has_valid"] else 0) + (T if has_actions else 0)
        if entry["nbytes"] != expected:
            raise DatasetFormatError(
                f"episode block size {entry['nbytes']} does not match shape (expected {expected})",
                start,
            )
        if start + expected > len(buf):
            raise DatasetFormatError("episode block runs past end of file", start)
        pos = start
        frames = np.frombuffer(buf, np.uint8, T * frame_size, pos).reshape((T,) + shape)
        pos += T * frame_size
        rewards = np.frombuffer(buf, "<f8", T, pos).astype(np.float64)
        pos += 8 * T
        valid = None
        if entry["has_valid"]:
            valid = np.frombuffer(buf, np.uint8, T, pos).astype(bool)
            pos += T
        actions = None
        if has_actions:
            actions = np.frombuffer(buf, np.int8, T, pos).copy()
        label = entry["return_label"]
        label = int(label) if label_kind == DISCRETE else float(label)
        episodes.append(
            Episode(
                frames=frames.copy(),
                rewards=rewards,
                return_label=label,
                policy_id=entry["policy_id"],
                events=tuple((t, k) for t, k in entry["events"]),
                gamma=entry["gamma"],
                seed=entry["seed"],
                valid=valid,
                actions=actions,
            )
        )
    return Dataset(tuple(episodes), label_kind, header["pad_length"], header["manifest"])


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(d: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(d))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
