"""Scenario configuration: JSON document, schema-checked, unknown keys rejected."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from jsonschema import Draft202012Validator

from ..errors import ConfigError
from ..fl_task import IID_RANDOM, NON_IID_SORTED, policy_from_json

PARADIGMS = ("ChainFL", "FedAvg", "AsynFL")

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_interval = {"type": "array", "items": _pos_num, "minItems": 2, "maxItems": 2}
_policy = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["fixed", "basic_round_model", "max_global_epochs", "max_gradients", "metric_threshold"]},
        "value": {"type": "number"},
        "n": _pos_int,
        "metric": {"enum": ["accuracy", "perplexity", "loss"]},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ScenarioConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "paradigm": {"enum": list(PARADIGMS)},
        "M": _pos_int,
        "S_d": _pos_int,
        "b": {"type": "integer", "minimum": 3},
        "B": _pos_int,
        "E": _pos_int,
        "mu": _pos_num,
        "R": _pos_int,
        "eta": {"type": "integer", "minimum": 2},
        "lambda": _pos_int,
        "lambda_g": {"oneOf": [_pos_int, {"type": "null"}]},
        "F": {"oneOf": [_pos_num, {"const": "inf"}, {"type": "null"}]},
        "candidacy_policy": {"enum": ["indefinite", "extend"]},
        "M_d": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "straggler_ratio": {"type": "number", "minimum": 0, "maximum": 1},
        "straggler_delay": _pos_num,
        "attack": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gaussian_noise", "sign_flip", "scale"]},
                "sd": _pos_num,
                "factor": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "task": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["regression", "classification"]},
                "n_devices": _pos_int,
                "samples_per_device": _pos_int,
                "dim": _pos_int,
                "noise_sd": {"type": "number", "minimum": 0},
                "n_classes": {"type": "integer", "minimum": 2},
                "separation": _pos_num,
                "partition": {"enum": [NON_IID_SORTED, IID_RANDOM]},
            },
            "additionalProperties": False,
        },
        "termination": {"oneOf": [_policy, {"type": "null"}]},
        "a_tau": _policy,
        "max_global_epochs": _pos_int,
        "latency": {
            "type": "object",
            "properties": {"intra_shard": _interval, "shard_to_mainchain": _interval},
            "additionalProperties": False,
        },
        "compute_delay": _pos_num,
        "faults": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [{"type": "number", "minimum": 0}, {"enum": ["crash", "recover"]}, {"type": "string"}],
                "minItems": 3,
                "maxItems": 3,
            },
        },
        "planted": {
            "type": "object",
            "properties": {
                "times": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "sd": _pos_num,
            },
            "additionalProperties": False,
        },
        "round_timeout": {"oneOf": [_pos_num, {"type": "null"}]},
        "quorum_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "shard": {
            "type": "object",
            "properties": {
                "block_threshold": _pos_int,
                "block_period": _pos_num,
                "heartbeat_interval": _pos_num,
                "election_timeout": _pos_num,
                "replication_timeout": _pos_num,
                "postpone_delay": _pos_num,
                "max_retries": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "eval_every": {"oneOf": [_pos_int, {"type": "null"}]},
        "t_max": _pos_num,
    },
}

_FAULT_TARGET = re.compile(r"^s(\d+)(?:-n(\d+)|:leader)$")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    paradigm: str = "ChainFL"
    M: int = 3
    S_d: int = 10
    b: int = 3
    B: int = 10
    E: int = 1
    mu: float = 0.05
    R: int = 1
    eta: int = 3
    lam: int = 2
    lambda_g: Optional[int] = None
    F: Optional[float] = None
    candidacy_policy: str = "indefinite"
    M_d: float = 0.0
    straggler_ratio: float = 0.0
    straggler_delay: float = 100.0
    attack: dict = field(default_factory=lambda: {"kind": "gaussian_noise", "sd": 10.0})
    task: dict = field(default_factory=lambda: {"kind": "regression"})
    termination: Optional[dict] = None
    a_tau: dict = field(default_factory=lambda: {"kind": "basic_round_model"})
    max_global_epochs: int = 1000
    latency: dict = field(default_factory=dict)
    compute_delay: float = 1.0
    faults: tuple = ()
    planted: dict = field(default_factory=dict)
    round_timeout: Optional[float] = None
    quorum_fraction: float = 2.0 / 3.0
    shard: dict = field(default_factory=dict)
    eval_every: Optional[int] = None
    t_max: float = 1e7

    # -- derived --------------------------------------------------------

    @property
    def lambda_global(self) -> int:
        return self.lambda_g if self.lambda_g is not None else self.lam

    @property
    def evaluation_period(self) -> int:
        return self.eval_every if self.eval_every is not None else self.M

    def intra_bounds(self) -> tuple:
        return tuple(self.latency.get("intra_shard", (0.1, 0.5)))

    def mainchain_bounds(self) -> tuple:
        return tuple(self.latency.get("shard_to_mainchain", (0.5, 1.5)))

    def resolved_round_timeout(self) -> float:
        """Three honest compute times plus slack for the two intra-shard hops."""
        if self.round_timeout is not None:
            return float(self.round_timeout)
        return 3.0 * self.E * self.compute_delay + 3.0 * self.intra_bounds()[1]

    def estimated_iteration(self) -> float:
        hop, main = self.intra_bounds()[1], self.mainchain_bounds()[1]
        return self.R * (self.E * self.compute_delay + 6 * hop) + 2 * main + 4 * hop

    def resolved_freshness(self) -> float:
        if self.F == "inf":
            return math.inf
        if self.F is None:
            return 4.0 * self.estimated_iteration()
        return float(self.F)

    # -- (de)serialization ----------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["faults"] = [list(f) for f in self.faults]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def with_(self, **changes) -> "ScenarioConfig":
        if "lambda" in changes:
            changes["lam"] = changes.pop("lambda")
        return validate(replace(self, **changes).to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return validate(d)


def _semantic_errors(cfg: ScenarioConfig) -> list:
    errs = []
    if cfg.lam >= cfg.eta:
        errs.append(f"lambda: must be < eta ({cfg.lam} >= {cfg.eta})")
    if cfg.b % 2 == 0:
        errs.append(f"b: must be odd (2a+1), got {cfg.b}")
    if cfg.M_d + cfg.straggler_ratio > 1:
        errs.append(f"M_d: M_d + straggler_ratio must not exceed 1 ({cfg.M_d} + {cfg.straggler_ratio})")
    n_devices = cfg.task.get("n_devices", 60)
    if cfg.paradigm == "ChainFL" and n_devices // cfg.M < cfg.S_d:
        errs.append(f"S_d: each of {cfg.M} shard pools holds {n_devices // cfg.M} devices, fewer than S_d={cfg.S_d}")
    if cfg.paradigm != "ChainFL" and n_devices < cfg.S_d:
        errs.append(f"S_d: only {n_devices} devices, fewer than S_d={cfg.S_d}")
    for key in ("termination", "a_tau"):
        val = getattr(cfg, key)
        if val is None:
            continue
        try:
            policy_from_json(val)
        except (KeyError, ValueError) as exc:
            errs.append(f"{key}: {exc}")
            continue
        kind = val["kind"]
        if key == "a_tau" and kind not in ("fixed", "basic_round_model"):
            errs.append(f"a_tau: kind {kind!r} is not a threshold policy")
        if key == "termination" and kind in ("fixed", "basic_round_model"):
            errs.append(f"termination: kind {kind!r} is not a termination policy")
    task_kind = cfg.task.get("kind")
    if cfg.termination and cfg.termination.get("kind") == "metric_threshold":
        metric = cfg.termination.get("metric")
        if task_kind == "regression" and metric != "loss":
            errs.append("termination: regression tasks terminate on 'loss'")
    for i, (t, kind, target) in enumerate(cfg.faults):
        m = _FAULT_TARGET.match(target)
        if not m or int(m.group(1)) >= cfg.M or (m.group(2) is not None and int(m.group(2)) >= cfg.b):
            errs.append(f"faults/{i}: unknown target {target!r}")
        elif kind == "recover" and m.group(2) is None:
            errs.append(f"faults/{i}: 'recover' needs a concrete node, not {target!r}")
    if cfg.attack["kind"] == "gaussian_noise" and "sd" not in cfg.attack:
        errs.append("attack: gaussian_noise needs 'sd'")
    if cfg.attack["kind"] == "scale" and "factor" not in cfg.attack:
        errs.append("attack: scale needs 'factor'")
    return errs


def validate(d: dict) -> ScenarioConfig:
    """Schema check plus cross-field invariants; raises :class:`ConfigError`."""
    if not isinstance(d, dict):
        raise ConfigError(["<root>: expected a JSON object"])
    validator = Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(d), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError([f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors])
    kw = dict(d)
    if "lambda" in kw:
        kw["lam"] = kw.pop("lambda")
    if "faults" in kw:
        kw["faults"] = tuple(tuple(f) for f in kw["faults"])
    names = {f.name for f in fields(ScenarioConfig)}
    cfg = ScenarioConfig(**{k: v for k, v in kw.items() if k in names})
    errs = _semantic_errors(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<root>: invalid JSON ({exc})"]) from None
    except OSError as exc:
        raise ConfigError([f"<root>: cannot read {path} ({exc.strerror})"]) from None
    return validate(data)
