"""Device agents: status reports, local training and attack injection."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .errors import ValidationError
from .model_math import LabeledDataset, as_params, local_train
from .simnet import rng_stream
from .subchain import LOCAL_MODEL, SubchainTx, sign


@dataclass(frozen=True, eq=False)
class DeviceProfile:
    device_id: str
    dataset: LabeledDataset
    battery: float = 1.0
    network_quality: float = 1.0
    willing: bool = True
    compute_delay: float = 1.0

    def __post_init__(self):
        for name in ("battery", "network_quality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.compute_delay < 0:
            raise ValidationError("compute_delay must be non-negative")


# -- behaviours ---------------------------------------------------------------


@dataclass(frozen=True)
class Honest:
    pass


@dataclass(frozen=True)
class Straggler:
    extra_delay: float

    def __post_init__(self):
        if not self.extra_delay > 0:
            raise ValidationError("straggler extra_delay must be positive")


@dataclass(frozen=True)
class GaussianNoise:
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValidationError("noise sd must be positive")


@dataclass(frozen=True)
class SignFlip:
    pass


@dataclass(frozen=True)
class Scale:
    factor: float


Attack = Union[GaussianNoise, SignFlip, Scale]


@dataclass(frozen=True)
class Malicious:
    attack: Attack = field(default_factory=lambda: GaussianNoise(10.0))


Behavior = Union[Honest, Straggler, Malicious]


def apply_attack(attack: Attack, trained: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poison a trained parameter vector. Noise replaces the vector outright."""
    if isinstance(attack, GaussianNoise):
        return as_params(rng.normal(scale=attack.sd, size=trained.shape[0]))
    if isinstance(attack, SignFlip):
        return as_params(-trained)
    if isinstance(attack, Scale):
        return as_params(attack.factor * trained)
    raise ValidationError(f"unknown attack {attack!r}")


# -- status ---------------------------------------------------------------


@dataclass(frozen=True)
class DeviceStatus:
    device_id: str
    willing: bool
    battery: float
    network_quality: float
    n_samples: int
    t: float

    def eligible(self, batt_min: float = 0.0, net_min: float = 0.0) -> bool:
        return self.willing and self.battery >= batt_min and self.network_quality >= net_min


def report_status(profile: DeviceProfile, now: float = 0.0) -> DeviceStatus:
    return DeviceStatus(profile.device_id, profile.willing, profile.battery,
                        profile.network_quality, profile.dataset.size, now)


def walk_status(profile: DeviceProfile, rng: np.random.Generator, sd: float) -> DeviceProfile:
    """One clipped random-walk step of battery and network quality."""
    if sd <= 0:
        return profile
    b, q = rng.normal(scale=sd, size=2)
    return replace(profile,
                   battery=float(np.clip(profile.battery + b, 0.0, 1.0)),
                   network_quality=float(np.clip(profile.network_quality + q, 0.0, 1.0)))


# -- training ---------------------------------------------------------------


def training_rng(seed: int, device_id: str, k: int) -> np.random.Generator:
    """Stream for a device's k-th local training (shared by every paradigm)."""
    return rng_stream(seed, "device.train", f"{device_id}/{k}")


def attack_rng(seed: int, device_id: str, k: int) -> np.random.Generator:
    return rng_stream(seed, "device.attack", f"{device_id}/{k}")


def local_model(profile: DeviceProfile, behavior: Behavior, w_brm, spec, rng, attack_stream=None) -> np.ndarray:
    """Parameters a device would upload after training from ``w_brm``."""
    trained = local_train(w_brm, profile.dataset, spec.hp, rng, spec.loss_kind)
    if isinstance(behavior, Malicious):
        return apply_attack(behavior.attack, trained, attack_stream if attack_stream is not None else rng)
    return trained


def delivery_delay(profile: DeviceProfile, behavior: Behavior, epochs: int) -> float:
    extra = behavior.extra_delay if isinstance(behavior, Straggler) else 0.0
    return epochs * profile.compute_delay + extra


def run_local_update(profile: DeviceProfile, behavior: Behavior, w_brm, spec, store, rng,
                     *, task_id: str, round_no: int, timestamp: float = 0.0,
                     attack_stream=None) -> SubchainTx:
    """Train, optionally poison, store the parameters and pack the transaction."""
    params = local_model(profile, behavior, w_brm, spec, rng, attack_stream)
    key = store.put_params(params)
    return SubchainTx(
        sender_id=profile.device_id,
        task_id=task_id,
        round_no=round_no,
        params_hash=key,
        timestamp=timestamp,
        n_samples=profile.dataset.size,
        kind=LOCAL_MODEL,
        signature=sign(profile.device_id, key),
    )


@dataclass(frozen=True)
class TrainRequest:
    shard_id: str
    task_id: str
    round_no: int
    attempt: int
    w_brm_hash: str
    nodes: tuple


class DeviceAgent:
    """Simulation actor wrapping one device.

    On a :class:`TrainRequest` it trains immediately (the result is a pure
    function of its inputs) and releases the transaction after the compute
    delay, sending it to a uniformly chosen subchain node.
    """

    def __init__(self, profile: DeviceProfile, behavior: Behavior, spec, store, seed: int,
                 status_walk_sd: float = 0.0):
        self.profile = profile
        self.behavior = behavior
        self.spec = spec
        self.store = store
        self.seed = seed
        self.status_walk_sd = status_walk_sd
        self.trainings = 0
        self.completed = 0
        self._status_rng = rng_stream(seed, "device.status", profile.device_id)

    @property
    def device_id(self) -> str:
        return self.profile.device_id

    def status(self, now: float) -> DeviceStatus:
        self.profile = walk_status(self.profile, self._status_rng, self.status_walk_sd)
        return report_status(self.profile, now)

    def on_message(self, sim, src, msg):
        if not isinstance(msg, TrainRequest):
            return
        k = self.trainings
        self.trainings += 1
        w_brm = self.store.get_params(msg.w_brm_hash)
        params = local_model(self.profile, self.behavior, w_brm, self.spec,
                             training_rng(self.seed, self.device_id, k),
                             attack_rng(self.seed, self.device_id, k))
        delay = delivery_delay(self.profile, self.behavior, self.spec.hp.E)
        sim.set_timer(self.device_id, "upload", delay, (msg, params))

    def on_timer(self, sim, tag, payload):
        msg, params = payload
        self.completed += 1
        key = self.store.put_params(params)
        tx = SubchainTx(
            sender_id=self.device_id, task_id=msg.task_id, round_no=msg.round_no,
            params_hash=key, timestamp=sim.now, n_samples=self.profile.dataset.size,
            kind=LOCAL_MODEL, signature=sign(self.device_id, key),
        )
        sim.trace.log(sim.now, self.device_id, "local_update", task_id=msg.task_id,
                      round_no=msg.round_no, attempt=msg.attempt, params_hash=key,
                      epochs=self.spec.hp.E)
        rng = sim.rng("device.route", self.device_id)
        dst = msg.nodes[int(rng.integers(len(msg.nodes)))]
        sim.send(self.device_id, dst, tx)
