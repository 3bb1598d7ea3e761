"""scikit-learn style wrapper around the detector/predictor pair.

``fit`` trains both networks, ``transform`` returns one mask per episode and
``predict`` returns the predictor's labels (or values, for regression).

Inputs are either a :class:`~critstate.core.Dataset` or a sequence of episodes,
each an array of uint8 frames ``[T, H, W, C]``; ``y`` holds one return label per
episode and is required unless a Dataset is given.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .core import CONTINUOUS, DISCRETE, Dataset, Episode
from .evaluation import detect, predict
from .models import CLASSIFIER, REGRESSOR, ArchitectureSpec
from .training import LossWeights, TrainConfig, train


def check_frames(episode, frame_shape=None) -> np.ndarray:
    """Validate one episode of frames and return it as a uint8 array."""
    arr = np.asarray(episode)
    if arr.ndim != 4:
        raise ValueError(f"an episode must be [T, H, W, C], got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("an episode needs at least one frame")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
            raise ValueError("frames must be uint8 (or integers in [0, 255])")
        arr = arr.astype(np.uint8)
    if frame_shape is not None and arr.shape[1:] != tuple(frame_shape):
        raise ValueError(f"frame shape {arr.shape[1:]} does not match {tuple(frame_shape)}")
    return arr


def check_labels(y, n: int, label_kind: str) -> np.ndarray:
    """Validate per-episode labels: integers >= 0 for discrete, finite floats otherwise."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if label_kind == DISCRETE:
        if not np.all(np.equal(np.mod(y, 1), 0)) or (y < 0).any():
            raise ValueError("discrete labels must be non-negative integers")
        return y.astype(np.int64)
    y = y.astype(np.float64)
    if not np.isfinite(y).all():
        raise ValueError("continuous labels must be finite")
    return y


def as_dataset(X, y=None, label_kind: str = DISCRETE, frame_shape=None) -> Dataset:
    """Coerce ``X`` (and ``y``) into a Dataset; labels default to 0 when ``y`` is None."""
    if isinstance(X, Dataset):
        if y is not None:
            y = check_labels(y, len(X), label_kind)
            eps = tuple(replace(e, return_label=_label(v, label_kind)) for e, v in zip(X.episodes, y))
            return Dataset(eps, label_kind)
        return X
    if isinstance(X, np.ndarray) and X.ndim == 5:
        X = list(X)
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a Dataset or a non-empty sequence of episodes")
    frames = [check_frames(x, frame_shape) for x in X]
    shape = frames[0].shape[1:]
    if any(f.shape[1:] != shape for f in frames):
        raise ValueError("all episodes must share the same frame shape")
    labels = check_labels(y, len(frames), label_kind) if y is not None else np.zeros(len(frames))
    eps = tuple(
        Episode(frames=f, rewards=np.zeros(len(f)), return_label=_label(v, label_kind), seed=i)
        for i, (f, v) in enumerate(zip(frames, labels))
    )
    return Dataset(eps, label_kind)


def _label(v, label_kind):
    return int(v) if label_kind == DISCRETE else float(v)


class CriticalStateIdentifier(TransformerMixin, BaseEstimator):
    """Learn which steps of an episode its return depends on.

    Parameters mirror the training defaults: AdamW at 1e-4, loss weights
    (1, 5e-3, 2) for importance, compactness and reverse terms.
    """

    def __init__(
        self,
        kind="frame_recurrent",
        label_kind=DISCRETE,
        n_classes=2,
        channels=(32, 64, 128, 128, 256),
        hidden=128,
        epochs=10,
        batch_size=32,
        learning_rate=1e-4,
        weight_decay=1e-4,
        lambda_s=1.0,
        lambda_r=5e-3,
        lambda_v=2.0,
        lambda_orth=0.0,
        reverse_mode=None,
        seed=0,
    ):
        self.kind = kind
        self.label_kind = label_kind
        self.n_classes = n_classes
        self.channels = channels
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lambda_s = lambda_s
        self.lambda_r = lambda_r
        self.lambda_v = lambda_v
        self.lambda_orth = lambda_orth
        self.reverse_mode = reverse_mode
        self.seed = seed

    def _spec(self, in_channels: int) -> ArchitectureSpec:
        head = CLASSIFIER if self.label_kind == DISCRETE else REGRESSOR
        return ArchitectureSpec(kind=self.kind, head=head, n_classes=self.n_classes, in_channels=in_channels,
                                channels=tuple(self.channels), hidden=self.hidden)

    def fit(self, X, y=None):
        if self.label_kind not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        if y is None and not isinstance(X, Dataset):
            raise ValueError("y is required unless X is a Dataset")
        data = as_dataset(X, y, self.label_kind)
        if data.label_kind != self.label_kind:
            raise ValueError(f"dataset labels are {data.label_kind}, estimator expects {self.label_kind}")
        if self.label_kind == DISCRETE:
            top = max(e.return_label for e in data.episodes)
            if top >= self.n_classes:
                raise ValueError(f"label {top} outside [0, {self.n_classes})")
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            reverse_mode=self.reverse_mode,
            label_kind=self.label_kind,
        )
        w = LossWeights(self.lambda_s, self.lambda_r, self.lambda_v, self.lambda_orth)
        result = train(data, self._spec(data.frame_shape[-1]), cfg, w)
        self.predictor_, self.detector_ = result.G, result.D
        self.history_ = result.epochs
        self.frame_shape_ = data.frame_shape
        self.n_features_in_ = int(np.prod(data.frame_shape))
        return self

    def _check_fitted(self):
        if not hasattr(self, "detector_"):
            raise NotFittedError("call fit before using the estimator")

    def _data(self, X) -> Dataset:
        self._check_fitted()
        data = as_dataset(X, None, self.label_kind, self.frame_shape_)
        if data.frame_shape != self.frame_shape_:
            raise ValueError(f"frame shape {data.frame_shape} does not match fitted {self.frame_shape_}")
        return data

    def transform(self, X) -> list[np.ndarray]:
        """Per-episode step confidences in [0, 1]."""
        data = self._data(X)
        return detect(self.detector_, data)

    def decision_function(self, X, masks=None) -> np.ndarray:
        """Raw predictor outputs, optionally on masked episodes."""
        data = self._data(X)
        return predict(self.predictor_, data, masks)

    def predict(self, X) -> np.ndarray:
        out = self.decision_function(X)
        if self.label_kind == DISCRETE:
            return out.argmax(-1)
        return out.reshape(len(out))

    def predict_proba(self, X) -> np.ndarray:
        if self.label_kind != DISCRETE:
            raise AttributeError("predict_proba is only defined for discrete labels")
        return torch.softmax(torch.as_tensor(self.decision_function(X)), -1).numpy()

    def score(self, X, y=None) -> float:
        """Accuracy for discrete labels, negative mean absolute error otherwise."""
        data = as_dataset(X, y, self.label_kind) if y is not None or isinstance(X, Dataset) else None
        if data is None:
            raise ValueError("y is required unless X is a Dataset")
        truth = np.array([e.return_label for e in data.episodes])
        pred = self.predict(data)
        if self.label_kind == DISCRETE:
            return float(np.mean(pred == truth))
        return -float(np.mean(np.abs(pred - truth)))
