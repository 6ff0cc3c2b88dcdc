"""DAG ledger shared by all shards.

Vertices are shard-model transactions; an edge ``child -> parent`` means
the child approved the parent. Tips are vertices nobody has approved yet.
A tip must be picked as a candidate by some leader within its freshness
window or it is virtually pruned: kept in storage, never selectable again.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DoubleGenesisError,
    LedgerError,
    NotFoundError,
    PrunedApprovalError,
    UnknownApprovalError,
    ValidationError,
)
from .model_math import uniform_aggregate, validation_score

FRESH_TIP = "FreshTip"
APPROVED = "Approved"
PRUNED = "Pruned"

INDEFINITE = "indefinite"
EXTEND = "extend"
CANDIDACY_POLICIES = (INDEFINITE, EXTEND)

GENESIS_SENDER = "requester"


@dataclass(frozen=True)
class MainchainTx:
    sender_shard_id: str
    task_id: str
    params_hash: str
    approves: tuple
    timestamp: float
    payload: str = ""

    def __post_init__(self):
        object.__setattr__(self, "approves", tuple(self.approves))

    @property
    def is_genesis(self) -> bool:
        return not self.approves

    def to_dict(self) -> dict:
        return {
            "sender_shard_id": self.sender_shard_id,
            "task_id": self.task_id,
            "params_hash": self.params_hash,
            "approves": list(self.approves),
            "timestamp": self.timestamp,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MainchainTx":
        return cls(d["sender_shard_id"], d["task_id"], d["params_hash"], tuple(d["approves"]),
                   float(d["timestamp"]), d.get("payload", ""))

    @property
    def tx_id(self) -> str:
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()


def make_mainchain_tx(shard_id: str, task_id: str, params_hash: str, approves, now: float) -> MainchainTx:
    if not approves:
        raise ValidationError("a shard transaction must approve at least one vertex")
    return MainchainTx(shard_id, task_id, params_hash, tuple(approves), now)


@dataclass
class TipRecord:
    tx_id: str
    received_at: float
    freshness_deadline: float
    candidacy_count: int = 0
    status: str = FRESH_TIP


class DagLedger:
    """Single serialized ledger state machine."""

    def __init__(self, freshness: float = math.inf, candidacy_policy: str = INDEFINITE):
        if not freshness > 0:
            raise ValidationError(f"freshness time must be positive, got {freshness}")
        if candidacy_policy not in CANDIDACY_POLICIES:
            raise ValidationError(f"unknown candidacy policy {candidacy_policy!r}")
        self.freshness = float(freshness)
        self.candidacy_policy = candidacy_policy
        self.vertices: dict[str, MainchainTx] = {}
        self.records: dict[str, TipRecord] = {}
        self.approvers: dict[str, list] = {}
        self.tips: dict[str, TipRecord] = {}
        self.genesis_id: Optional[str] = None

    # -- construction -------------------------------------------------------

    def _insert(self, tx: MainchainTx, now: float) -> None:
        tid = tx.tx_id
        self.vertices[tid] = tx
        self.approvers[tid] = []
        rec = TipRecord(tid, now, now + self.freshness)
        self.records[tid] = rec
        self.tips[tid] = rec

    def create_genesis(self, spec, test_set_hash: str, init_params_hash: str, now: float = 0.0) -> MainchainTx:
        if self.genesis_id is not None:
            raise DoubleGenesisError("ledger already has a genesis transaction")
        payload = json.dumps({"spec": spec.canonical_bytes().decode(), "test_set": test_set_hash},
                             sort_keys=True, separators=(",", ":"))
        g0 = MainchainTx(GENESIS_SENDER, spec.task_id_root, init_params_hash, (), now, payload)
        self._insert(g0, now)
        self.genesis_id = g0.tx_id
        return g0

    def genesis_spec(self):
        from .fl_task import TaskSpec

        g0 = self.vertices[self.genesis_id]
        return TaskSpec.from_bytes(json.loads(g0.payload)["spec"].encode())

    def submit_tx(self, tx: MainchainTx, now: float) -> bool:
        """Insert ``tx``; returns False for a duplicate of an existing vertex."""
        if self.genesis_id is None:
            raise LedgerError("ledger has no genesis")
        tid = tx.tx_id
        if tid in self.vertices:
            return False
        if not tx.approves:
            raise DoubleGenesisError("only the genesis may approve nothing")
        for parent in tx.approves:
            rec = self.records.get(parent)
            if rec is None:
                raise UnknownApprovalError(f"approves unknown vertex {parent}")
            if rec.status == PRUNED:
                raise PrunedApprovalError(f"approves pruned vertex {parent}")
        self._insert(tx, now)
        for parent in dict.fromkeys(tx.approves):
            self.approvers[parent].append(tid)
            rec = self.records[parent]
            if rec.status == FRESH_TIP:
                rec.status = APPROVED
                del self.tips[parent]
        return True

    # -- freshness ----------------------------------------------------------

    def _expired(self, rec: TipRecord, now: float) -> bool:
        # the genesis carries the task and is the root every fallback leads to
        if now < rec.freshness_deadline or rec.tx_id == self.genesis_id:
            return False
        return self.candidacy_policy == EXTEND or rec.candidacy_count == 0

    def prune_expired(self, now: float) -> list:
        pruned = [tid for tid, rec in self.tips.items() if self._expired(rec, now)]
        for tid in pruned:
            self.records[tid].status = PRUNED
            del self.tips[tid]
        return pruned

    def selectable(self, now: float) -> list:
        """Tip ids that a request at ``now`` could return (no state change)."""
        return [tid for tid, rec in self.tips.items() if not self._expired(rec, now)]

    def mark_candidate(self, tx_id: str, now: float) -> None:
        rec = self.records[tx_id]
        rec.candidacy_count += 1
        if self.candidacy_policy == EXTEND:
            rec.freshness_deadline = max(rec.freshness_deadline, now + self.freshness)

    def latest_approved(self) -> str:
        best = None
        for tid, rec in self.records.items():
            if rec.status == APPROVED and (best is None or rec.received_at >= self.records[best].received_at):
                best = tid
        return best if best is not None else self.genesis_id

    def request_tips(self, eta: int, now: float, rng: np.random.Generator, first: bool = False) -> list:
        """Candidate tips for one leader; marks each returned tip as a candidate.

        The first iteration of a shard always starts from the genesis.
        Expired zero-candidacy tips are pruned before sampling; if nothing is
        left the most recent approved vertex is returned instead.
        """
        if first:
            self.mark_candidate(self.genesis_id, now)
            return [self.vertices[self.genesis_id]]
        self.prune_expired(now)
        pool = sorted(self.selectable(now))
        if not pool:
            return [self.vertices[self.latest_approved()]]
        k = min(eta, len(pool))
        picked = sorted(rng.choice(len(pool), size=k, replace=False))
        out = []
        for i in picked:
            self.mark_candidate(pool[i], now)
            out.append(self.vertices[pool[i]])
        return out

    # -- structure checks ---------------------------------------------------

    def recompute_tips(self) -> set:
        approved = {p for tx in self.vertices.values() for p in tx.approves}
        return {tid for tid in self.vertices if tid not in approved and self.records[tid].status != PRUNED}

    def is_acyclic(self) -> bool:
        indeg = {tid: len(tx.approves) for tid, tx in self.vertices.items()}
        ready = [tid for tid, d in indeg.items() if d == 0]
        seen = 0
        while ready:
            tid = ready.pop()
            seen += 1
            for child in self.approvers[tid]:
                indeg[child] -= 1
                if indeg[child] == 0:
                    ready.append(child)
        return seen == len(self.vertices)

    def reaches_genesis(self) -> bool:
        ok = {self.genesis_id}
        for tid, tx in self.vertices.items():  # insertion order is topological
            if tid != self.genesis_id:
                if not any(p in ok for p in tx.approves):
                    return False
                ok.add(tid)
        return True

    # -- export -------------------------------------------------------------

    def export_lines(self):
        for tid, tx in self.vertices.items():
            yield json.dumps({"tx_id": tid, "sender": tx.sender_shard_id, "approves": list(tx.approves),
                              "timestamp": tx.timestamp, "status": self.records[tid].status},
                             sort_keys=True)

    def export(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.export_lines():
                fh.write(line + "\n")


# --------------------------------------------------------------------------
# model selection


@dataclass(frozen=True)
class IterationModel:
    w_bim: np.ndarray = field(repr=False)
    approve_set: tuple
    scores: tuple  # (tx_id, score) for every candidate, best first
    unresolved: tuple = ()


def build_basic_iteration_model(tips: Sequence[MainchainTx], lam: int, test_set, store, loss_kind) -> IterationModel:
    """Average the ``lam`` best-scoring tips.

    Ties fall to the earlier timestamp, then the smaller tx id. A tip whose
    parameters cannot be resolved scores ``-inf`` and is never chosen.
    """
    if not tips:
        raise ValidationError("no tips to build from")
    if lam < 1:
        raise ValidationError("lambda must be >= 1")
    scored, params, unresolved = [], {}, []
    for tx in tips:
        tid = tx.tx_id
        try:
            w = store.get_params(tx.params_hash)
        except NotFoundError:
            unresolved.append(tid)
            scored.append((-math.inf, tx.timestamp, tid))
            continue
        params[tid] = w
        scored.append((validation_score(w, test_set, loss_kind), tx.timestamp, tid))
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    chosen = [tid for _, _, tid in scored if tid in params][:lam]
    if not chosen:
        raise NotFoundError("no tip parameters could be resolved")
    w_bim = uniform_aggregate([params[t] for t in chosen])
    return IterationModel(w_bim, tuple(chosen), tuple((t, s) for s, _, t in scored), tuple(unresolved))


def aggregate_global(ledger: DagLedger, lambda_g: int, test_set, store, loss_kind, now: float) -> np.ndarray:
    """Read-only observer view: top ``lambda_g`` selectable tips, uniformly averaged."""
    ids = ledger.selectable(now)
    if not ids:
        ids = [ledger.latest_approved()]
    tips = [ledger.vertices[t] for t in ids]
    return build_basic_iteration_model(tips, lambda_g, test_set, store, loss_kind).w_bim


def check_stop(termination, *, epoch: int, gradients: int, metric: float) -> bool:
    from .fl_task import MaxGlobalEpochs, MaxGradients, MetricThreshold

    if isinstance(termination, MaxGlobalEpochs):
        return epoch >= termination.n
    if isinstance(termination, MaxGradients):
        return gradients >= termination.n
    if isinstance(termination, MetricThreshold):
        return termination.reached(metric)
    raise ValidationError(f"unknown termination {termination!r}")


# --------------------------------------------------------------------------
# simulation entity


@dataclass(frozen=True)
class TipsRequest:
    shard_id: str
    node_id: str
    eta: int
    first: bool


@dataclass(frozen=True)
class TipsResponse:
    tips: tuple


@dataclass(frozen=True)
class Submit:
    tx: MainchainTx


class MainchainNode:
    """The mainchain as a simulation entity; serializes every request."""

    def __init__(self, ledger: DagLedger, entity_id: str = "mainchain"):
        self.ledger = ledger
        self.entity_id = entity_id
        self.listeners: list[Callable] = []
        self.tip_requests: list = []  # (t, shard, returned ids)
        self.approve_sets: list = []  # (t, shard, approves)

    def on_message(self, sim, src, msg):
        if isinstance(msg, TipsRequest):
            pruned = self.ledger.prune_expired(sim.now)
            self._log_pruned(sim, pruned)
            tips = self.ledger.request_tips(msg.eta, sim.now, sim.rng("mainchain.tips", msg.shard_id), msg.first)
            ids = [t.tx_id for t in tips]
            self.tip_requests.append((sim.now, msg.shard_id, tuple(ids)))
            sim.trace.log(sim.now, self.entity_id, "tips", shard=msg.shard_id, tips=ids)
            sim.send(self.entity_id, src, TipsResponse(tuple(tips)), link="shard_to_mainchain")
        elif isinstance(msg, Submit):
            self.accept(sim, msg.tx, notify=True)

    def accept(self, sim, tx: MainchainTx, notify: bool) -> bool:
        try:
            fresh = self.ledger.submit_tx(tx, sim.now)
        except LedgerError as exc:
            sim.trace.log(sim.now, self.entity_id, "submit_rejected", tx_id=tx.tx_id, reason=type(exc).__name__)
            return False
        if not fresh:
            sim.trace.log(sim.now, self.entity_id, "submit_duplicate", tx_id=tx.tx_id)
            return False
        self.approve_sets.append((sim.now, tx.sender_shard_id, tx.approves))
        sim.trace.log(sim.now, self.entity_id, "submit", tx_id=tx.tx_id, sender=tx.sender_shard_id,
                      approves=list(tx.approves))
        deadline = self.ledger.records[tx.tx_id].freshness_deadline
        if math.isfinite(deadline):
            sim.set_timer(self.entity_id, "prune", deadline - sim.now, tx.tx_id)
        if notify:
            for fn in self.listeners:
                fn(sim, tx)
        return True

    def on_timer(self, sim, tag, payload):
        if tag == "prune":
            self._log_pruned(sim, self.ledger.prune_expired(sim.now))
            rec = self.ledger.records[payload]
            if rec.status == FRESH_TIP and math.isfinite(rec.freshness_deadline) and rec.freshness_deadline > sim.now:
                # deadline moved under the extend policy
                sim.set_timer(self.entity_id, "prune", rec.freshness_deadline - sim.now, payload)

    def _log_pruned(self, sim, pruned) -> None:
        for tid in pruned:
            sim.trace.log(sim.now, self.entity_id, "pruned", tx_id=tid,
                          candidacies=self.ledger.records[tid].candidacy_count)
