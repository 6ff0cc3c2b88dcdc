"""Metric rows and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable

HEADER = ("paradigm", "seed", "global_epoch", "gradients", "sim_time", "metric_kind", "metric_value", "loss")


@dataclass(frozen=True)
class MetricsRow:
    paradigm: str
    seed: int
    global_epoch: int
    gradients: int
    sim_time: float
    metric_kind: str
    metric_value: float
    loss: float


def _fmt(v) -> str:
    # repr keeps every bit of a float and is stable across runs
    return repr(v) if isinstance(v, float) else str(v)


def emit_metrics(rows: Iterable[MetricsRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in astuple(row)])
    return path


def read_metrics(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(MetricsRow(rec["paradigm"], int(rec["seed"]), int(rec["global_epoch"]),
                                  int(rec["gradients"]), float(rec["sim_time"]), rec["metric_kind"],
                                  float(rec["metric_value"]), float(rec["loss"])))
    return out
