"""Deterministic discrete-event engine.

A run is a pure function of its configuration and master seed: events are
ordered by ``(fire_at, seq)``, every random draw comes from a named
substream, and wall-clock time never leaks into the trace.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import ContractViolation, WatchdogError

DELIVER = "deliver"
TIMER = "timer"
CRASH = "crash"
RECOVER = "recover"


def _stream_key(*parts) -> list:
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return [int.from_bytes(h[i:i + 4], "little") for i in range(0, 16, 4)]


def rng_stream(master_seed, module: str, entity="") -> np.random.Generator:
    """Independent generator keyed by ``(master_seed, module, entity)``."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=_stream_key(module, entity))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(order=True)
class SimEvent:
    fire_at: float
    seq: int
    kind: str = field(compare=False)
    dst: str = field(compare=False)
    src: Optional[str] = field(default=None, compare=False)
    tag: Optional[str] = field(default=None, compare=False)
    payload: Any = field(default=None, compare=False)
    incarnation: int = field(default=0, compare=False)
    src_incarnation: Optional[int] = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo <= self.hi:
            raise ValueError(f"latency bounds must satisfy 0 < lo <= hi, got [{self.lo}, {self.hi}]")

    def sample(self, rng) -> float:
        if self.lo == self.hi:
            return self.lo
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class LatencyModel:
    intra_shard: Uniform = Uniform(0.1, 0.5)
    shard_to_mainchain: Uniform = Uniform(0.5, 1.5)
    stream: str = "latency"


def payload_digest(payload) -> str:
    data = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(data).hexdigest()


class Trace:
    """Append-only instrumentation log.

    ``records`` keeps full payloads for in-process checks; :meth:`trace_lines`
    renders the compact ``(t, entity, kind, digest)`` schema.
    """

    def __init__(self):
        self.records: list[dict] = []

    def log(self, t: float, entity: str, kind: str, **payload) -> None:
        self.records.append({"t": t, "entity": entity, "kind": kind, "payload": payload})

    def of_kind(self, *kinds) -> list:
        return [r for r in self.records if r["kind"] in kinds]

    def trace_lines(self):
        for r in self.records:
            yield json.dumps(
                {"t": r["t"], "entity": r["entity"], "kind": r["kind"], "digest": payload_digest(r["payload"])},
                sort_keys=True,
            )

    def event_lines(self):
        for r in self.records:
            yield json.dumps(r, sort_keys=True, default=str)

    def write(self, trace_path, events_path=None) -> None:
        with open(trace_path, "w") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")
        if events_path is not None:
            with open(events_path, "w") as fh:
                for line in self.event_lines():
                    fh.write(line + "\n")


class Simulator:
    """Single-threaded event loop owning every protocol state machine.

    Entities register a handler exposing any of ``on_message(sim, src, msg)``,
    ``on_timer(sim, tag, payload)``, ``on_crash(sim)`` and ``on_recover(sim)``.
    Crashing an entity bumps its incarnation; messages and timers addressed to
    an older incarnation, and messages still in flight from one, are dropped.
    """

    def __init__(self, seed: int, latency: Optional[LatencyModel] = None, trace: Optional[Trace] = None,
                 wall_budget: float = 60.0):
        self.seed = seed
        self.latency = latency or LatencyModel()
        self.trace = trace if trace is not None else Trace()
        self.now = 0.0
        self.wall_budget = wall_budget
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._handlers: dict[str, Any] = {}
        self._down: set[str] = set()
        self._incarnation: dict[str, int] = {}
        self._rngs: dict[tuple, np.random.Generator] = {}
        self._last_link: dict[tuple, float] = {}
        self.dispatched = 0

    # -- registration / rng -------------------------------------------------

    def register(self, entity_id: str, handler) -> None:
        self._handlers[entity_id] = handler
        self._incarnation.setdefault(entity_id, 0)

    def handler(self, entity_id: str):
        return self._handlers[entity_id]

    def rng(self, module: str, entity="") -> np.random.Generator:
        key = (module, str(entity))
        gen = self._rngs.get(key)
        if gen is None:
            gen = self._rngs[key] = rng_stream(self.seed, module, entity)
        return gen

    def is_up(self, entity_id: str) -> bool:
        return entity_id not in self._down

    # -- scheduling ---------------------------------------------------------

    def schedule(self, event: SimEvent) -> SimEvent:
        if not event.fire_at >= self.now:
            raise ContractViolation(f"event at {event.fire_at} scheduled in the past (now={self.now})")
        heapq.heappush(self._queue, event)
        return event

    def _event(self, at, kind, dst, **kw) -> SimEvent:
        return self.schedule(SimEvent(at, next(self._seq), kind, dst, **kw))

    def send(self, src: str, dst: str, msg, link: str = "intra_shard", delay: Optional[float] = None) -> SimEvent:
        """Deliver ``msg`` after a sampled latency; per-link delivery is FIFO."""
        if delay is None:
            delay = getattr(self.latency, link).sample(self.rng(self.latency.stream, src))
        at = max(self.now + delay, self._last_link.get((src, dst), -math.inf))
        self._last_link[(src, dst)] = at
        return self._event(at, DELIVER, dst, src=src, payload=msg,
                           incarnation=self._incarnation.get(dst, 0),
                           src_incarnation=self._incarnation.get(src))

    def set_timer(self, owner: str, tag: str, delay: float, payload=None) -> SimEvent:
        if delay < 0:
            raise ContractViolation(f"negative timer delay {delay}")
        return self._event(self.now + delay, TIMER, owner, tag=tag, payload=payload,
                           incarnation=self._incarnation.get(owner, 0))

    def inject_fault(self, schedule) -> None:
        """Queue crash/recover events from ``[(time, 'crash'|'recover', entity), ...]``."""
        for at, kind, node in schedule:
            if kind not in (CRASH, RECOVER):
                raise ContractViolation(f"unknown fault kind {kind!r}")
            if node not in self._handlers:
                raise ContractViolation(f"fault targets unknown entity {node!r}")
            self._event(float(at), kind, node)

    # -- loop ---------------------------------------------------------------

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def run_until(self, condition: Optional[Callable[[], bool]] = None, t_max: float = math.inf) -> float:
        """Dispatch events until ``condition()`` holds, ``t_max`` or exhaustion."""
        last_wall = time.monotonic()
        while self._queue:
            if condition is not None and condition():
                break
            if self._queue[0].fire_at > t_max:
                self.now = max(self.now, t_max)
                break
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            self._dispatch(ev)
            self.dispatched += 1
            wall = time.monotonic()
            if wall - last_wall > self.wall_budget:
                raise WatchdogError(f"event at t={ev.fire_at} ({ev.kind} -> {ev.dst}) exceeded the wall budget")
            last_wall = wall
        return self.now

    def _dispatch(self, ev: SimEvent) -> None:
        h = self._handlers.get(ev.dst)
        if ev.kind == CRASH:
            if ev.dst in self._down:
                return
            self._down.add(ev.dst)
            self._incarnation[ev.dst] += 1
            self.trace.log(self.now, ev.dst, "crash")
            if hasattr(h, "on_crash"):
                h.on_crash(self)
            return
        if ev.kind == RECOVER:
            if ev.dst not in self._down:
                return
            self._down.discard(ev.dst)
            self.trace.log(self.now, ev.dst, "recover")
            if hasattr(h, "on_recover"):
                h.on_recover(self)
            return
        # a crash loses the sender's unsent buffer as well as the receiver's inbox
        lost_at_src = ev.src_incarnation is not None and ev.src_incarnation != self._incarnation.get(ev.src)
        if ev.dst in self._down or ev.incarnation != self._incarnation.get(ev.dst, 0) or lost_at_src:
            if ev.kind == DELIVER:
                self.trace.log(self.now, ev.dst, "drop", src=ev.src, msg=type(ev.payload).__name__)
            return
        if ev.kind == DELIVER:
            h.on_message(self, ev.src, ev.payload)
        else:
            h.on_timer(self, ev.tag, ev.payload)
