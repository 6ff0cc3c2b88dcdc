"""Synthetic tasks, device partitions and the exact-solution oracle.

Real datasets are out of reach at desk scale, so two small generators stand
in: noiseless/noisy linear regression (with a closed-form optimum to check
convergence against) and Gaussian-blob classification (for accuracy based
validation and robustness experiments).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import store as _store
from .errors import ValidationError
from .model_math import ACCURACY, LOSS, METRIC_KINDS, PERPLEXITY, HyperParams, LabeledDataset, as_params

NON_IID_SORTED = "NonIIDSorted"
IID_RANDOM = "IIDRandom"
TEST_FRACTION = 0.2


# --------------------------------------------------------------------------
# task requirements


@dataclass(frozen=True)
class FixedThreshold:
    value: float


@dataclass(frozen=True)
class BasicRoundModelMetric:
    """Threshold equals the validation score of the current round's base model."""


@dataclass(frozen=True)
class MaxGlobalEpochs:
    n: int


@dataclass(frozen=True)
class MaxGradients:
    n: int


@dataclass(frozen=True)
class MetricThreshold:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValidationError(f"unknown metric kind {self.kind!r}")

    def reached(self, metric: float) -> bool:
        # accuracy is higher-is-better, loss and perplexity lower-is-better
        if self.kind == ACCURACY:
            return metric >= self.value
        return metric <= self.value


ATauPolicy = Union[FixedThreshold, BasicRoundModelMetric]
Termination = Union[MaxGlobalEpochs, MaxGradients, MetricThreshold]


def policy_to_json(p):
    if isinstance(p, FixedThreshold):
        return {"kind": "fixed", "value": p.value}
    if isinstance(p, BasicRoundModelMetric):
        return {"kind": "basic_round_model"}
    if isinstance(p, MaxGlobalEpochs):
        return {"kind": "max_global_epochs", "n": p.n}
    if isinstance(p, MaxGradients):
        return {"kind": "max_gradients", "n": p.n}
    if isinstance(p, MetricThreshold):
        return {"kind": "metric_threshold", "metric": p.kind, "value": p.value}
    raise TypeError(p)


def policy_from_json(d):
    kind = d["kind"]
    if kind == "fixed":
        return FixedThreshold(float(d["value"]))
    if kind == "basic_round_model":
        return BasicRoundModelMetric()
    if kind == "max_global_epochs":
        return MaxGlobalEpochs(int(d["n"]))
    if kind == "max_gradients":
        return MaxGradients(int(d["n"]))
    if kind == "metric_threshold":
        return MetricThreshold(d["metric"], float(d["value"]))
    raise ValidationError(f"unknown policy kind {kind!r}")


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Everything the requester publishes in the genesis transaction."""

    task_id_root: str
    model_dim: int
    init_params: np.ndarray
    loss_kind: str
    hp: HyperParams
    R: int = 1
    eta: int = 3
    lam: int = 2
    a_tau_policy: ATauPolicy = field(default_factory=BasicRoundModelMetric)
    termination: Termination = field(default_factory=lambda: MaxGlobalEpochs(150))
    test_set_ref: str = ""
    quorum_fraction: float = 2.0 / 3.0
    round_timeout: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "init_params", as_params(self.init_params))
        if self.init_params.shape[0] != self.model_dim:
            raise ValidationError(
                f"init_params has {self.init_params.shape[0]} entries, model_dim is {self.model_dim}"
            )
        if self.R < 1:
            raise ValidationError(f"R must be >= 1, got {self.R}")
        if self.eta < 2:
            raise ValidationError(f"eta must be >= 2, got {self.eta}")
        if not 1 <= self.lam < self.eta:
            raise ValidationError(f"lambda must satisfy 1 <= lambda < eta, got {self.lam} with eta={self.eta}")
        if not 0.0 < self.quorum_fraction <= 1.0:
            raise ValidationError(f"quorum_fraction must be in (0, 1], got {self.quorum_fraction}")
        if not self.round_timeout > 0:
            raise ValidationError("round_timeout must be positive")

    def with_(self, **changes) -> "TaskSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "task_id_root": self.task_id_root,
            "model_dim": self.model_dim,
            "init_params": [float(v) for v in self.init_params],
            "loss_kind": self.loss_kind,
            "hp": {"mu": self.hp.mu, "E": self.hp.E, "B": self.hp.B},
            "R": self.R,
            "eta": self.eta,
            "lambda": self.lam,
            "a_tau_policy": policy_to_json(self.a_tau_policy),
            "termination": policy_to_json(self.termination),
            "test_set_ref": self.test_set_ref,
            "quorum_fraction": self.quorum_fraction,
            "round_timeout": self.round_timeout,
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            task_id_root=d["task_id_root"],
            model_dim=int(d["model_dim"]),
            init_params=np.array(d["init_params"], dtype=np.float64),
            loss_kind=d["loss_kind"],
            hp=HyperParams(**d["hp"]),
            R=int(d["R"]),
            eta=int(d["eta"]),
            lam=int(d["lambda"]),
            a_tau_policy=policy_from_json(d["a_tau_policy"]),
            termination=policy_from_json(d["termination"]),
            test_set_ref=d["test_set_ref"],
            quorum_fraction=float(d["quorum_fraction"]),
            round_timeout=float(d["round_timeout"]),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "TaskSpec":
        return cls.from_dict(json.loads(data))


# --------------------------------------------------------------------------
# partitions


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    assignments: dict
    scheme: str

    @property
    def device_ids(self) -> list:
        return sorted(self.assignments)

    def total_size(self) -> int:
        return sum(ds.size for ds in self.assignments.values())

    def pooled(self) -> LabeledDataset:
        return LabeledDataset.concat([self.assignments[d] for d in self.device_ids])


def device_name(i: int) -> str:
    return f"d{i:04d}"


def _split_sizes(n: int, parts: int) -> list:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _contiguous_plan(source: LabeledDataset, order, n_devices: int, scheme: str) -> PartitionPlan:
    assignments = {}
    start = 0
    for i, size in enumerate(_split_sizes(source.size, n_devices)):
        assignments[device_name(i)] = source.subset(order[start:start + size])
        start += size
    return PartitionPlan(assignments, scheme)


def partition_noniid(source: LabeledDataset, n_devices: int) -> PartitionPlan:
    """Sort by label and hand out contiguous groups, remainder to the front."""
    if n_devices < 1 or n_devices > source.size:
        raise ValidationError(f"cannot split {source.size} samples over {n_devices} devices")
    order = np.argsort(source.y, kind="stable")
    return _contiguous_plan(source, order, n_devices, NON_IID_SORTED)


def partition_iid(source: LabeledDataset, n_devices: int, rng: np.random.Generator) -> PartitionPlan:
    if n_devices < 1 or n_devices > source.size:
        raise ValidationError(f"cannot split {source.size} samples over {n_devices} devices")
    return _contiguous_plan(source, rng.permutation(source.size), n_devices, IID_RANDOM)


def label_entropy(ds: LabeledDataset) -> float:
    _, counts = np.unique(ds.y, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


# --------------------------------------------------------------------------
# generators


@dataclass(frozen=True, eq=False)
class RegressionOracle:
    train: LabeledDataset
    test: LabeledDataset
    w_true: np.ndarray


@dataclass(frozen=True, eq=False)
class GeneratedTask:
    plan: PartitionPlan
    spec: TaskSpec
    test_set: LabeledDataset
    oracle: Optional[RegressionOracle] = None

    @property
    def n_classes(self) -> int:
        if not self.test_set.is_classification:
            return 0
        return self.spec.model_dim // self.test_set.n_features


def _rng(seed, tag: str) -> np.random.Generator:
    # local import: simnet pulls in nothing from here, keeps generators standalone
    from .simnet import rng_stream

    return rng_stream(seed, "fl_task", tag)


def _n_test(n_train: int) -> int:
    return max(1, math.ceil(n_train * TEST_FRACTION / (1 - TEST_FRACTION)))


def generate_synthetic_regression(
    seed: int,
    n_devices: int,
    samples_per_device: int,
    dim: int,
    noise_sd: float = 0.0,
    hp: Optional[HyperParams] = None,
) -> GeneratedTask:
    """Linear data ``y = x.w* + noise`` dealt i.i.d. to devices."""
    if min(n_devices, samples_per_device, dim) < 1 or noise_sd < 0:
        raise ValidationError("counts must be positive and noise_sd non-negative")
    rng = _rng(seed, "regression")
    w_true = rng.normal(size=dim)
    n_train = n_devices * samples_per_device
    n = n_train + _n_test(n_train)
    X = rng.normal(size=(n, dim))
    y = X @ w_true + (rng.normal(scale=noise_sd, size=n) if noise_sd > 0 else 0.0)
    train = LabeledDataset(X[:n_train], y[:n_train])
    test = LabeledDataset(X[n_train:], y[n_train:])
    plan = _contiguous_plan(train, np.arange(n_train), n_devices, IID_RANDOM)
    spec = TaskSpec(
        task_id_root=f"reg-{seed}",
        model_dim=dim,
        init_params=np.zeros(dim),
        loss_kind="squared",
        hp=hp or HyperParams(mu=0.05, E=1, B=10),
        termination=MetricThreshold(LOSS, 1e-3),
        test_set_ref=_store.digest(_store.serialize_dataset(test)),
    )
    return GeneratedTask(plan, spec, test, RegressionOracle(train, test, as_params(w_true)))


def generate_synthetic_classification(
    seed: int,
    n_devices: int,
    samples_per_device: int,
    dim: int,
    n_classes: int,
    separation: float = 4.0,
    hp: Optional[HyperParams] = None,
    scheme: str = NON_IID_SORTED,
) -> GeneratedTask:
    """Unit-variance Gaussian blobs around random class means.

    Means are random unit directions scaled by ``separation``; a constant
    bias feature is appended so the model has ``(dim + 1) * n_classes``
    parameters.
    """
    if n_classes < 2:
        raise ValidationError("need at least two classes")
    if min(n_devices, samples_per_device, dim) < 1:
        raise ValidationError("counts must be positive")
    rng = _rng(seed, "classification")
    means = rng.normal(size=(n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    n_train = n_devices * samples_per_device
    n = n_train + _n_test(n_train)
    labels = rng.permutation(np.arange(n) % n_classes)
    feats = means[labels] + rng.normal(size=(n, dim))
    X = np.hstack([feats, np.ones((n, 1))])
    test = LabeledDataset(X[n_train:], labels[n_train:])
    train = LabeledDataset(X[:n_train], labels[:n_train])
    if scheme == NON_IID_SORTED:
        plan = partition_noniid(train, n_devices)
    elif scheme == IID_RANDOM:
        plan = partition_iid(train, n_devices, _rng(seed, "iid-split"))
    else:
        raise ValidationError(f"unknown partition scheme {scheme!r}")
    model_dim = (dim + 1) * n_classes
    spec = TaskSpec(
        task_id_root=f"cls-{seed}",
        model_dim=model_dim,
        init_params=np.zeros(model_dim),
        loss_kind="cross_entropy",
        hp=hp or HyperParams(mu=0.05, E=1, B=10),
        termination=MetricThreshold(ACCURACY, 0.95),
        test_set_ref=_store.digest(_store.serialize_dataset(test)),
    )
    return GeneratedTask(plan, spec, test)


def closed_form_optimum(oracle_data, ridge: float = 1e-9) -> np.ndarray:
    """Least-squares solution of the pooled normal equations."""
    ds = oracle_data.train if isinstance(oracle_data, RegressionOracle) else oracle_data
    if ds.is_classification:
        raise ValidationError("closed-form optimum is defined for regression only")
    A = ds.X.T @ ds.X + ridge * np.eye(ds.n_features)
    if np.linalg.cond(A) > 1e14:
        raise ValidationError("normal equations are singular even with the ridge term")
    try:
        w = np.linalg.solve(A, ds.X.T @ ds.y)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"normal equations unsolvable: {exc}") from None
    return as_params(w)


# --------------------------------------------------------------------------
# snapshots


def export_dataset(ds: LabeledDataset, path) -> None:
    """One record per line: comma-separated features followed by the label."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for x, y in zip(ds.X, ds.y):
            label = int(y) if ds.is_classification else repr(float(y))
            writer.writerow([repr(float(v)) for v in x] + [label])


def import_dataset(path) -> LabeledDataset:
    rows, labels = [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec:
                continue
            rows.append([float(v) for v in rec[:-1]])
            labels.append(rec[-1])
    if not rows:
        raise ValidationError(f"{path} holds no records")
    if all(lbl.lstrip("-").isdigit() for lbl in labels):
        y = np.array([int(v) for v in labels], dtype=np.int64)
    else:
        y = np.array([float(v) for v in labels], dtype=np.float64)
    return LabeledDataset(np.array(rows, dtype=np.float64), y)


__all__ = [
    "ACCURACY", "LOSS", "PERPLEXITY", "TaskSpec", "PartitionPlan", "GeneratedTask",
    "FixedThreshold", "BasicRoundModelMetric", "MaxGlobalEpochs", "MaxGradients",
    "MetricThreshold", "partition_noniid", "partition_iid", "closed_form_optimum",
    "generate_synthetic_regression", "generate_synthetic_classification",
    "export_dataset", "import_dataset", "label_entropy",
]
