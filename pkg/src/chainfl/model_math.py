"""Numeric kernels: losses, SGD, local training, aggregation and metrics.

Parameter vectors are flat ``float64`` numpy arrays. Every function here is
pure: inputs are never modified and returned arrays are fresh and read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AggregationEmptyError,
    NumericOverflowError,
    ShapeMismatchError,
    ValidationError,
)

ACCURACY = "accuracy"
PERPLEXITY = "perplexity"
LOSS = "loss"
METRIC_KINDS = (ACCURACY, PERPLEXITY, LOSS)


def as_params(values) -> np.ndarray:
    """Return a read-only 1-D float64 copy of ``values``."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.flags.writeable = False
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix ``X`` (n x d) with targets ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.array(self.y)
        if y.dtype.kind not in "iuf":
            raise ValidationError(f"unsupported label dtype {y.dtype}")
        y = y.astype(np.int64 if y.dtype.kind in "iu" else np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ShapeMismatchError(f"X has shape {X.shape} but y has {y.shape}")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.X.shape[1])

    @property
    def is_classification(self) -> bool:
        return self.y.dtype.kind == "i"

    def __len__(self) -> int:
        return self.size

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx])

    def same_as(self, other: "LabeledDataset") -> bool:
        return (
            self.X.shape == other.X.shape
            and self.y.dtype == other.y.dtype
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        if not parts:
            raise ValidationError("cannot concatenate zero datasets")
        return LabeledDataset(
            np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts])
        )


@dataclass(frozen=True)
class HyperParams:
    mu: float
    E: int
    B: int

    def __post_init__(self):
        if not self.mu > 0 or not math.isfinite(self.mu):
            raise ValidationError(f"mu must be a finite positive number, got {self.mu}")
        if self.E < 1:
            raise ValidationError(f"E must be >= 1, got {self.E}")
        if self.B < 1:
            raise ValidationError(f"B must be >= 1, got {self.B}")


@dataclass(frozen=True)
class MetricValue:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValidationError(f"unknown metric kind {self.kind!r}")


# --------------------------------------------------------------------------
# losses


class SquaredLoss:
    """Per-sample loss ``(x.w - y)**2`` for linear regression."""

    name = "squared"

    def per_sample(self, w, X, y):
        r = X @ w - y
        return r * r

    def gradient(self, w, X, y):
        r = X @ w - y
        return (2.0 / X.shape[0]) * (X.T @ r)


class CrossEntropyLoss:
    """Multinomial logistic regression.

    ``w`` is the row-major flattening of a (n_features, n_classes) weight
    matrix; the class count is inferred from ``w.size``.
    """

    name = "cross_entropy"

    @staticmethod
    def _weights(w, X):
        d = X.shape[1]
        if w.size % d:
            raise ShapeMismatchError(f"parameter size {w.size} not a multiple of {d} features")
        return w.reshape(d, w.size // d)

    def _probs(self, w, X):
        logits = X @ self._weights(w, X)
        logits = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(logits)
        return expd / expd.sum(axis=1, keepdims=True), logits

    def per_sample(self, w, X, y):
        _, logits = self._probs(w, X)
        log_norm = np.log(np.exp(logits).sum(axis=1))
        return log_norm - logits[np.arange(X.shape[0]), y]

    def gradient(self, w, X, y):
        P, _ = self._probs(w, X)
        P[np.arange(X.shape[0]), y] -= 1.0
        return (X.T @ P).reshape(-1) / X.shape[0]

    def predict(self, w, X):
        return np.argmax(X @ self._weights(w, X), axis=1)


LOSSES = {"squared": SquaredLoss(), "cross_entropy": CrossEntropyLoss()}


def get_loss(loss_kind):
    """Resolve a loss by name; objects with ``per_sample``/``gradient`` pass through."""
    if isinstance(loss_kind, str):
        try:
            return LOSSES[loss_kind]
        except KeyError:
            raise ValidationError(f"unknown loss kind {loss_kind!r}") from None
    return loss_kind


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite {what}")


# --------------------------------------------------------------------------
# training


def sgd_step(w, batch: LabeledDataset, mu: float, loss_kind) -> np.ndarray:
    """One gradient step on the mean per-sample loss of ``batch``."""
    if batch.size == 0:
        raise ValidationError("empty batch")
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w, "parameters")
    grad = get_loss(loss_kind).gradient(w, batch.X, batch.y)
    _check_finite(grad, "gradient")
    out = w - mu * grad
    _check_finite(out, "parameters after step")
    return _frozen(out)


def local_train(w0, dataset: LabeledDataset, hp: HyperParams, rng: np.random.Generator, loss_kind) -> np.ndarray:
    """Run ``hp.E`` shuffled epochs of mini-batch SGD; the short tail batch is kept."""
    if dataset.size == 0:
        raise ValidationError("empty dataset")
    loss = get_loss(loss_kind)
    w = as_params(w0)
    n = dataset.size
    X, y = dataset.X, dataset.y
    for _ in range(hp.E):
        order = rng.permutation(n)
        for start in range(0, n, hp.B):
            # batch membership comes from the shuffle; sorting only fixes the summation order
            idx = np.sort(order[start:start + hp.B])
            grad = loss.gradient(w, X[idx], y[idx])
            _check_finite(grad, "gradient")
            w = w - hp.mu * grad
        _check_finite(w, "parameters after epoch")
    return _frozen(np.array(w, dtype=np.float64))


# --------------------------------------------------------------------------
# aggregation


def _stack(vectors: Sequence) -> np.ndarray:
    if len(vectors) == 0:
        raise AggregationEmptyError("nothing to aggregate")
    arrs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    dim = arrs[0].shape[0]
    for a in arrs[1:]:
        if a.shape[0] != dim:
            raise ShapeMismatchError(f"dimension mismatch: {a.shape[0]} != {dim}")
    stacked = np.stack(arrs)
    _check_finite(stacked, "model parameters")
    return stacked


def weighted_aggregate(models: Iterable[tuple]) -> np.ndarray:
    """Dataset-size weighted mean ``sum_j |D_j| w_j / sum_j |D_j|``."""
    models = list(models)
    if not models:
        raise AggregationEmptyError("nothing to aggregate")
    weights = []
    for _, weight in models:
        if int(weight) != weight or weight <= 0:
            raise ValidationError(f"weights must be positive integers, got {weight}")
        weights.append(int(weight))
    stacked = _stack([w for w, _ in models])
    total = sum(weights)
    if len(set(weights)) == 1:
        # equal weights reduce exactly to the plain mean
        return _frozen(stacked.sum(axis=0) / len(weights))
    coeffs = np.array(weights, dtype=np.float64)
    return _frozen((coeffs @ stacked) / float(total))


def uniform_aggregate(models: Sequence) -> np.ndarray:
    stacked = _stack(list(models))
    return _frozen(stacked.sum(axis=0) / stacked.shape[0])


def asynfl_update(w_gm, w_lm) -> np.ndarray:
    """Asynchronous server rule: new global = half old global + half local."""
    a = np.asarray(w_gm, dtype=np.float64)
    b = np.asarray(w_lm, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return _frozen(0.5 * a + 0.5 * b)


# --------------------------------------------------------------------------
# metrics


def evaluate_loss(w, dataset: LabeledDataset, loss_kind) -> MetricValue:
    if dataset.size == 0:
        raise ValidationError("empty dataset")
    w = np.asarray(w, dtype=np.float64)
    per = get_loss(loss_kind).per_sample(w, dataset.X, dataset.y)
    value = float(np.mean(per))
    if not math.isfinite(value):
        raise NumericOverflowError("non-finite loss")
    return MetricValue(LOSS, value)


def predict(w, X) -> np.ndarray:
    return LOSSES["cross_entropy"].predict(np.asarray(w, dtype=np.float64), X)


def accuracy(w, test: LabeledDataset) -> MetricValue:
    if test.size == 0:
        raise ValidationError("empty test set")
    if not test.is_classification:
        raise ValidationError("accuracy needs integer class labels")
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        return MetricValue(ACCURACY, 0.0)
    hits = int(np.count_nonzero(predict(w, test.X) == test.y))
    return MetricValue(ACCURACY, hits / test.size)


def perplexity(predicted_dist) -> MetricValue:
    """``2**H(p)`` with ``H`` the entropy in bits."""
    p = np.asarray(predicted_dist, dtype=np.float64).reshape(-1)
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError("probabilities must be finite and non-negative")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log2(nz)))
    return MetricValue(PERPLEXITY, max(1.0, 2.0 ** entropy))


def validation_score(w, dataset: LabeledDataset, loss_kind) -> float:
    """Higher-is-better score used for thresholds and tip ranking.

    Accuracy for classification data, negated mean loss for regression.
    Non-finite models score ``-inf``.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        return -math.inf
    if dataset.is_classification:
        return accuracy(w, dataset).value
    try:
        return -evaluate_loss(w, dataset, loss_kind).value
    except NumericOverflowError:
        return -math.inf
