"""One shard's consortium chain.

The shard runs a Raft-flavoured crash-fault-tolerant log: a leader forms
blocks and needs acknowledgements from at least ``ceil((b - 1) / 2)``
followers to commit, followers validate device transactions against the
round threshold, and a heartbeat timeout triggers re-election among the live
nodes. On top of the log, the leader drives the synchronous shard training
iteration: publish the round model, select devices, collect validated local
models, aggregate, repeat ``R`` times and submit the result to the DAG.

Everything that must survive a leader crash (iteration context, round
models, selections, the submitted shard model) is written to the log as
leader records, so a newly elected leader can resume from it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import IterationError, NotFoundError, ValidationError
from .model_math import validation_score, weighted_aggregate

LOCAL_MODEL = "local_model"
TASK = "task"
ROUND_MODEL = "round_model"
SHARD_MODEL = "shard_model"

LEADER = "Leader"
FOLLOWER = "Follower"
CANDIDATE = "Candidate"

COMMITTED = "Committed"
FAILED = "Failed"

VALID = "Valid"
INVALID = "Invalid"

GENESIS_PREV = "0" * 64
ADMIT_ALL = -math.inf


def sign(sender: str, key: str) -> str:
    """Opaque signature placeholder; only its presence is ever checked."""
    return hashlib.sha256(f"{sender}:{key}".encode()).hexdigest()[:16]


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class SubchainTx:
    sender_id: str
    task_id: str
    round_no: int
    params_hash: str
    timestamp: float
    n_samples: int = 0
    kind: str = LOCAL_MODEL
    signature: str = ""
    meta: str = ""  # canonical JSON, used by leader records

    @property
    def tx_id(self) -> str:
        return hashlib.sha256(_canon([self.sender_id, self.task_id, self.round_no, self.params_hash,
                                      repr(self.timestamp), self.n_samples, self.kind, self.meta])).hexdigest()

    @property
    def info(self) -> dict:
        return json.loads(self.meta) if self.meta else {}


def leader_record(kind: str, leader_id: str, task_id: str, round_no: int, params_hash: str,
                  now: float, **meta) -> SubchainTx:
    return SubchainTx(leader_id, task_id, round_no, params_hash, now, 0, kind,
                      sign(leader_id, params_hash), json.dumps(meta, sort_keys=True))


@dataclass(frozen=True)
class Block:
    block_no: int
    prev_hash: str
    txs: tuple
    leader_id: str
    term: int
    commit_votes: int = 0

    def __post_init__(self):
        if not self.txs:
            raise ValidationError("a block must carry at least one transaction")

    @property
    def block_hash(self) -> str:
        return hashlib.sha256(_canon([self.block_no, self.prev_hash, [t.tx_id for t in self.txs],
                                      self.leader_id, self.term])).hexdigest()


def commit_quorum(b: int) -> int:
    """Follower acknowledgements a block needs: at least half of ``b - 1``."""
    return math.ceil((b - 1) / 2)


def fault_budget(b: int) -> int:
    """Largest ``a`` with ``b >= 2a + 1``."""
    return (b - 1) // 2


def verify_chain(log: Sequence[Block]) -> bool:
    prev = GENESIS_PREV
    for i, blk in enumerate(log):
        if blk.block_no != i or blk.prev_hash != prev:
            return False
        prev = blk.block_hash
    return True


# --------------------------------------------------------------------------
# pure operations


def select_devices(pool: Iterable, s_d: int, rng: np.random.Generator,
                   batt_min: float = 0.0, net_min: float = 0.0) -> Optional[tuple]:
    """Uniformly sample ``s_d`` eligible devices, or ``None`` if too few qualify.

    ``pool`` holds status snapshots (anything with ``device_id`` and
    ``eligible(batt_min, net_min)``).
    """
    eligible = sorted(s.device_id for s in pool if s.eligible(batt_min, net_min))
    if s_d < 1 or len(eligible) < s_d:
        return None
    picked = rng.choice(len(eligible), size=s_d, replace=False)
    return tuple(sorted(eligible[i] for i in picked))


@dataclass(frozen=True)
class Verdict:
    status: str
    reason: str
    score: float = -math.inf

    @property
    def valid(self) -> bool:
        return self.status == VALID


def validate_tx(tx: SubchainTx, test_set, a_tau: float, store, loss_kind) -> Verdict:
    """Valid iff the stored model's score strictly exceeds ``a_tau``."""
    if not tx.signature:
        return Verdict(INVALID, "unsigned")
    try:
        params = store.get_params(tx.params_hash)
    except NotFoundError:
        return Verdict(INVALID, "unresolvable")
    score = validation_score(params, test_set, loss_kind)
    if score > a_tau:
        return Verdict(VALID, "ok", score)
    return Verdict(INVALID, "below_threshold", score)


def tx_order_key(tx: SubchainTx):
    return (tx.timestamp, tx.sender_id, tx.tx_id)


def form_block(pending: Sequence[SubchainTx], *, block_no: int, prev_hash: str, leader_id: str,
               term: int, threshold: int, period_fired: bool = False) -> Optional[Block]:
    """Pack every pending tx once the size threshold is hit or the period ends."""
    if not pending:
        return None
    if len(pending) < threshold and not period_fired:
        return None
    return Block(block_no, prev_hash, tuple(sorted(pending, key=tx_order_key)), leader_id, term)


def replicate_block(block: Block, followers: Iterable, b: int) -> str:
    """Synchronous replication against in-process follower objects.

    Each follower exposes ``alive`` and ``accept_block(block) -> bool``. On
    commit the block lands in every live follower's log.
    """
    live = [f for f in followers if f.alive]
    acks = [f for f in live if f.accept_block(block)]
    if len(acks) >= commit_quorum(b):
        for f in live:
            f.mark_committed(block.block_no + 1)
        return COMMITTED
    return FAILED


def round_threshold(policy, w_brm, test_set, loss_kind, cold_start: bool) -> float:
    from .fl_task import BasicRoundModelMetric, FixedThreshold

    if isinstance(policy, FixedThreshold):
        return float(policy.value)
    if isinstance(policy, BasicRoundModelMetric):
        if cold_start:
            return ADMIT_ALL
        return validation_score(w_brm, test_set, loss_kind)
    raise ValidationError(f"unknown threshold policy {policy!r}")


def quorum_size(quorum_fraction: float, s_d: int) -> int:
    return max(1, math.ceil(quorum_fraction * s_d - 1e-12))


def aggregate_valid(valid: Sequence[tuple], fallback):
    """Size-weighted average of ``(sender_id, params, n_samples)``; keeps ``fallback`` if empty.

    Inputs are sorted by sender so the floating-point sum is order-free.
    """
    if not valid:
        return fallback
    ordered = sorted(valid, key=lambda v: v[0])
    return weighted_aggregate([(p, n) for _, p, n in ordered])


@dataclass
class RoundReport:
    round_no: int
    attempt: int
    selected: tuple
    a_tau: float
    uploaded: tuple
    valid: tuple
    abandoned: bool
    w_brm: np.ndarray = field(repr=False)
    w_s: Optional[np.ndarray] = field(default=None, repr=False)


def shard_training_iteration(w_bim, spec, devices: Sequence, test_set, store, *, s_d: int,
                             rng: np.random.Generator, seed: int = 0, first_iteration: bool = False,
                             max_retries: int = 5, batt_min: float = 0.0, net_min: float = 0.0,
                             reports: Optional[list] = None):
    """The shard training loop without the network: returns the shard model after ``R`` rounds.

    ``devices`` are :class:`~chainfl.device.DeviceAgent` objects. A device
    whose delivery delay exceeds ``spec.round_timeout`` misses the round. A
    round with fewer uploads than the quorum is abandoned and retried with a
    fresh selection, without consuming one of the ``R`` rounds.
    """
    from .device import attack_rng, delivery_delay, local_model, training_rng

    by_id = {d.device_id: d for d in devices}
    w_brm = w_s = w_bim
    r = 0
    attempt = 0
    retries = 0
    quorum = quorum_size(spec.quorum_fraction, s_d)
    while r < spec.R:
        a_tau = round_threshold(spec.a_tau_policy, w_brm, test_set, spec.loss_kind,
                                cold_start=first_iteration and r == 0)
        selected = select_devices([d.status(0.0) for d in devices], s_d, rng, batt_min, net_min)
        if selected is None:
            raise IterationError(f"only {len(devices)} devices, fewer than {s_d} eligible")
        uploaded, valid = [], []
        for dev_id in selected:
            dev = by_id[dev_id]
            k = dev.trainings
            dev.trainings += 1
            params = local_model(dev.profile, dev.behavior, w_brm, spec,
                                 training_rng(seed, dev_id, k), attack_rng(seed, dev_id, k))
            dev.completed += 1
            if delivery_delay(dev.profile, dev.behavior, spec.hp.E) > spec.round_timeout:
                continue
            uploaded.append(dev_id)
            key = store.put_params(params)
            tx = SubchainTx(dev_id, "sync", r, key, 0.0, dev.profile.dataset.size, LOCAL_MODEL, sign(dev_id, key))
            if validate_tx(tx, test_set, a_tau, store, spec.loss_kind).valid:
                valid.append((dev_id, params, tx.n_samples))
        abandoned = len(uploaded) < quorum
        report = RoundReport(r, attempt, selected, a_tau, tuple(uploaded),
                             tuple(v[0] for v in valid), abandoned, w_brm)
        if abandoned:
            retries += 1
            attempt += 1
            if reports is not None:
                reports.append(report)
            if retries > max_retries:
                raise IterationError(f"round {r} abandoned {retries} times")
            continue
        w_s = aggregate_valid(valid, w_brm)
        report.w_s = w_s
        if reports is not None:
            reports.append(report)
        w_brm = w_s
        r += 1
        attempt = 0
    return w_s


def elect_leader(nodes: Sequence, is_up: Callable[[str], bool]):
    """Pick the live node with the most up-to-date log, or ``None`` without a majority.

    Ordering is (term of last block, log length, node id).
    """
    live = [n for n in nodes if is_up(n.node_id)]
    if len(live) < len(nodes) // 2 + 1:
        return None
    return max(live, key=lambda n: (n.last_term, len(n.log), n.node_id))


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class AppendBlock:
    term: int
    leader_id: str
    block: Block
    commit_index: int


@dataclass(frozen=True)
class AppendAck:
    term: int
    node_id: str
    block_no: int
    block_hash: str


@dataclass(frozen=True)
class Heartbeat:
    term: int
    leader_id: str
    commit_index: int
    log_len: int
    last_hash: str


@dataclass(frozen=True)
class SyncRequest:
    node_id: str
    term: int


@dataclass(frozen=True)
class Sync:
    term: int
    leader_id: str
    blocks: tuple
    commit_index: int


@dataclass(frozen=True)
class SyncAck:
    term: int
    node_id: str
    log_len: int


@dataclass(frozen=True)
class Forward:
    tx: SubchainTx
    valid: bool
    reason: str
    node_id: str


@dataclass(frozen=True)
class StopSignal:
    pass


@dataclass
class ShardConfig:
    b: int = 3
    s_d: int = 10
    block_threshold: int = 4
    block_period: float = 1.0
    heartbeat_interval: float = 1.0
    election_timeout: float = 3.0
    replication_timeout: float = 4.0
    postpone_delay: float = 5.0
    max_retries: int = 5
    batt_min: float = 0.0
    net_min: float = 0.0

    def __post_init__(self):
        if self.b < 3 or self.b % 2 == 0:
            raise ValidationError(f"b must be odd and >= 3, got {self.b}")


# --------------------------------------------------------------------------
# event-driven shard


class Shard:
    """ShardState: the nodes of one subchain plus shared wiring.

    ``mainchain_id`` names the DAG node entity; ``tips_builder`` turns a
    list of mainchain transactions into ``(w_bim, approve_set)``.
    """

    def __init__(self, shard_id: str, spec, cfg: ShardConfig, devices: Sequence, test_set, store,
                 mainchain_id: str, tips_builder: Callable, make_mainchain_tx: Callable):
        self.shard_id = shard_id
        self.spec = spec
        self.cfg = cfg
        self.devices = {d.device_id: d for d in devices}
        self.test_set = test_set
        self.store = store
        self.mainchain_id = mainchain_id
        self.tips_builder = tips_builder
        self.make_mainchain_tx = make_mainchain_tx
        self.nodes = [SubchainNode(f"{shard_id}-n{k}", self) for k in range(cfg.b)]
        self.by_id = {n.node_id: n for n in self.nodes}
        self.term = 0
        self.leader_id: Optional[str] = None
        self.halted = False
        self.iterations_done = 0
        self.instrumentation: list = []  # (round_no, weights, senders) for invariant checks

    @property
    def node_ids(self) -> tuple:
        return tuple(n.node_id for n in self.nodes)

    def register(self, sim) -> None:
        for n in self.nodes:
            sim.register(n.node_id, n)

    def start(self, sim) -> None:
        """Elect the first leader and arm every follower's election timer."""
        for n in self.nodes:
            n.arm_election_timer(sim)
        self.detect_and_reelect(sim)

    def live_majority(self, sim) -> bool:
        return sum(sim.is_up(n) for n in self.node_ids) >= self.cfg.b // 2 + 1

    def quiescent(self, sim) -> bool:
        return self.halted or not self.live_majority(sim)

    def leader_node(self, sim):
        if self.leader_id is None or not sim.is_up(self.leader_id):
            return None
        node = self.by_id[self.leader_id]
        return node if node.role == LEADER else None

    def detect_and_reelect(self, sim):
        if self.halted or self.leader_node(sim) is not None:
            return self.leader_node(sim)
        winner = elect_leader(self.nodes, sim.is_up)
        if winner is None:
            sim.trace.log(sim.now, self.shard_id, "election_stalled", term=self.term)
            return None
        self.term += 1
        for n in self.nodes:
            if sim.is_up(n.node_id):
                n.term = self.term
                n.role = FOLLOWER
                n.leader_id = winner.node_id
                n.leader = None
        self.leader_id = winner.node_id
        sim.trace.log(sim.now, self.shard_id, "election", term=self.term, leader=winner.node_id,
                      log_len=len(winner.log))
        winner.become_leader(sim)
        return winner

    def committed_log(self) -> list:
        """Longest committed prefix over all nodes (crashed ones keep theirs)."""
        best = max(self.nodes, key=lambda n: n.commit_index)
        return best.log[:best.commit_index]


class SubchainNode:
    """One edge node of a shard; follower by default, leader when elected."""

    def __init__(self, node_id: str, shard: Shard):
        self.node_id = node_id
        self.shard = shard
        self.role = FOLLOWER
        self.term = 0
        self.log: list[Block] = []
        self.commit_index = 0
        self.leader_id: Optional[str] = None
        self.leader: Optional[LeaderRole] = None
        self.stop_requested = False
        self.round_ctx: Optional[dict] = None
        self.buffered: list[SubchainTx] = []
        self._election_timer = None
        self._last_sync_request = -math.inf

    # -- helpers used by replicate_block in the synchronous path -------------

    alive = True

    @property
    def last_term(self) -> int:
        return self.log[-1].term if self.log else 0

    @property
    def last_hash(self) -> str:
        return self.log[-1].block_hash if self.log else GENESIS_PREV

    def _verify(self, block: Block) -> bool:
        store = self.shard.store
        return all(tx.signature and tx.params_hash in store for tx in block.txs)

    def accept_block(self, block: Block) -> bool:
        if not self._verify(block):
            return False
        n = block.block_no
        if n < len(self.log):
            if self.log[n].block_hash == block.block_hash:
                return True
            if n < self.commit_index:
                return False
            del self.log[n:]
        if n != len(self.log) or block.prev_hash != self.last_hash:
            return False
        self.log.append(block)
        self._absorb(block)
        return True

    def mark_committed(self, index: int) -> None:
        self.commit_index = max(self.commit_index, min(index, len(self.log)))

    def _absorb(self, block: Block) -> None:
        for tx in block.txs:
            if tx.kind == ROUND_MODEL:
                info = tx.info
                self.round_ctx = {"task_id": tx.task_id, "round_no": tx.round_no,
                                  "attempt": info["attempt"], "a_tau": info["a_tau"],
                                  "selected": frozenset(info["selected"])}
            elif tx.kind == TASK:
                self.round_ctx = None

    # -- timers ---------------------------------------------------------------

    def arm_election_timer(self, sim) -> None:
        if self._election_timer is not None:
            self._election_timer.cancel()
        jitter = float(sim.rng("subchain.election", self.node_id).uniform(0, 0.5))
        self._election_timer = sim.set_timer(self.node_id, "election",
                                             self.shard.cfg.election_timeout + jitter)

    def on_timer(self, sim, tag, payload):
        if tag == "election":
            self._election_timer = None
            if self.shard.halted:
                return
            if self.role != LEADER:
                self.shard.detect_and_reelect(sim)
            self.arm_election_timer(sim)
        elif self.leader is not None:
            self.leader.on_timer(sim, tag, payload)

    def on_crash(self, sim) -> None:
        # volatile state is lost; the log is durable
        self.role = FOLLOWER
        self.leader = None
        self.round_ctx = None
        self.buffered = []
        self._election_timer = None

    def on_recover(self, sim) -> None:
        self.role = FOLLOWER
        self.leader_id = None
        if self.log:
            self._absorb_all()
        self.arm_election_timer(sim)

    def _absorb_all(self) -> None:
        self.round_ctx = None
        for blk in self.log:
            self._absorb(blk)

    # -- messages -------------------------------------------------------------

    def _follow(self, sim, term: int, leader_id: str) -> bool:
        if term < self.term:
            return False
        if term > self.term or self.role != FOLLOWER:
            self.term = term
            if self.role == LEADER and leader_id != self.node_id:
                self.role = FOLLOWER
                self.leader = None
        self.leader_id = leader_id
        self.arm_election_timer(sim)
        return True

    def on_message(self, sim, src, msg):
        if isinstance(msg, SubchainTx):
            self._on_device_tx(sim, msg)
        elif isinstance(msg, StopSignal):
            self.stop_requested = True
        elif self.leader is not None and self.role == LEADER:
            self.leader.on_message(sim, src, msg)
        elif isinstance(msg, AppendBlock):
            if not self._follow(sim, msg.term, msg.leader_id):
                return
            if msg.block.block_no > len(self.log):
                self._request_sync(sim, msg.leader_id)
                return
            if self.accept_block(msg.block):
                self.mark_committed(msg.commit_index)
                sim.send(self.node_id, msg.leader_id,
                         AppendAck(self.term, self.node_id, msg.block.block_no, msg.block.block_hash))
                self._drain_buffer(sim)
            else:
                self._request_sync(sim, msg.leader_id)
        elif isinstance(msg, Heartbeat):
            if not self._follow(sim, msg.term, msg.leader_id):
                return
            if len(self.log) < msg.log_len or (len(self.log) == msg.log_len and self.last_hash != msg.last_hash) \
                    or self.commit_index > msg.commit_index and len(self.log) > msg.log_len:
                self._request_sync(sim, msg.leader_id)
            self.mark_committed(msg.commit_index)
        elif isinstance(msg, Sync):
            if not self._follow(sim, msg.term, msg.leader_id):
                return
            self.log = list(msg.blocks)
            self.commit_index = min(msg.commit_index, len(self.log))
            self._absorb_all()
            sim.send(self.node_id, msg.leader_id, SyncAck(self.term, self.node_id, len(self.log)))
            self._drain_buffer(sim)

    def _request_sync(self, sim, leader_id: str) -> None:
        if sim.now - self._last_sync_request < self.shard.cfg.heartbeat_interval:
            return
        self._last_sync_request = sim.now
        sim.send(self.node_id, leader_id, SyncRequest(self.node_id, self.term))

    def _on_device_tx(self, sim, tx: SubchainTx) -> None:
        if self.role == LEADER and self.leader is not None:
            self.leader.on_device_tx(sim, tx, self.node_id)
            return
        ctx = self.round_ctx
        if ctx is None or (tx.task_id, tx.round_no) != (ctx["task_id"], ctx["round_no"]) \
                or tx.sender_id not in ctx["selected"]:
            # context for the round may still be in flight from the leader
            self.buffered.append(tx)
            return
        verdict = validate_tx(tx, self.shard.test_set, ctx["a_tau"], self.shard.store, self.shard.spec.loss_kind)
        sim.trace.log(sim.now, self.node_id, "verdict", sender=tx.sender_id, task_id=tx.task_id,
                      round_no=tx.round_no, status=verdict.status, reason=verdict.reason,
                      score=verdict.score, a_tau=ctx["a_tau"])
        if self.leader_id is not None:
            sim.send(self.node_id, self.leader_id, Forward(tx, verdict.valid, verdict.reason, self.node_id))

    def _drain_buffer(self, sim) -> None:
        if not self.buffered or self.round_ctx is None:
            return
        ctx = self.round_ctx
        keep, ready = [], []
        for tx in self.buffered:
            if (tx.task_id, tx.round_no) == (ctx["task_id"], ctx["round_no"]) and tx.sender_id in ctx["selected"]:
                ready.append(tx)
            else:
                keep.append(tx)
        self.buffered = keep[-64:]
        for tx in ready:
            self._on_device_tx(sim, tx)

    def become_leader(self, sim) -> None:
        self.role = LEADER
        self.leader_id = self.node_id
        if self._election_timer is not None:
            self._election_timer.cancel()
            self._election_timer = None
        self.leader = LeaderRole(self, sim)
        self.leader.take_office(sim)


class LeaderRole:
    """Volatile leader state; rebuilt from the log after every election."""

    def __init__(self, node: SubchainNode, sim):
        self.node = node
        self.shard = node.shard
        self.cfg = node.shard.cfg
        self.spec = node.shard.spec
        self.term = node.term
        self.synced: set = set()
        self.heard: dict = {}  # follower -> last time a message arrived from it
        self.ready = False
        # block pipeline
        self.pending: list[SubchainTx] = []
        self.queue: list[tuple] = []  # (txs, callback)
        self.inflight: Optional[tuple] = None  # (block, callback, acks, timer)
        self.tx_committed: set = set()
        # iteration / round state
        self.task_id: Optional[str] = None
        self.iteration_no = 0
        self.approve_set: tuple = ()
        self.round_no = 0
        self.attempt = 0
        self.retries = 0
        self.w_brm = None
        self.w_brm_hash = ""
        self.a_tau = ADMIT_ALL
        self.selected: tuple = ()
        self.uploads: set = set()
        self.valid: dict = {}
        self.round_open = False
        self.closing: Optional[set] = None
        self._round_timer = None
        self.awaiting_tips = False

    @property
    def node_id(self) -> str:
        return self.node.node_id

    def _followers(self):
        return [n for n in self.shard.node_ids if n != self.node_id]

    def responsive(self, sim) -> tuple:
        """Nodes devices should upload to: this leader plus recently heard followers."""
        window = self.cfg.replication_timeout
        live = [n for n, t in self.heard.items() if sim.now - t <= window]
        return tuple(sorted([self.node_id] + live))

    def log(self, sim, kind, **payload):
        sim.trace.log(sim.now, self.node_id, kind, term=self.term, **payload)

    # -- taking office ------------------------------------------------------

    def take_office(self, sim) -> None:
        """Replicate the whole log to a quorum, then resume from it."""
        self._broadcast_sync(sim)
        sim.set_timer(self.node_id, "heartbeat", self.cfg.heartbeat_interval, self.term)
        sim.set_timer(self.node_id, "block_period", self.cfg.block_period, self.term)

    def _broadcast_sync(self, sim) -> None:
        msg = Sync(self.term, self.node_id, tuple(self.node.log), self.node.commit_index)
        for f in self._followers():
            sim.send(self.node_id, f, msg)
        sim.set_timer(self.node_id, "sync_timeout", self.cfg.replication_timeout, self.term)

    def _on_synced(self, sim, node_id: str) -> None:
        if self.ready:
            return
        self.synced.add(node_id)
        if len(self.synced) >= commit_quorum(self.cfg.b):
            self.ready = True
            self.node.mark_committed(len(self.node.log))
            self.log(sim, "leader_ready", log_len=len(self.node.log))
            self.resume(sim)

    def resume(self, sim) -> None:
        task = last_round = last_submit = None
        iterations = 0
        for blk in self.node.log:
            for tx in blk.txs:
                if tx.kind == TASK:
                    task, last_round = tx, None
                    iterations += 1
                elif tx.kind == ROUND_MODEL:
                    last_round = tx
                elif tx.kind == SHARD_MODEL:
                    last_submit = tx
        self.iteration_no = iterations
        if task is None:
            self.start_iteration(sim)
            return
        if last_submit is not None and last_submit.task_id == task.task_id:
            # the mainchain deduplicates, so re-sending is harmless
            self._send_submission(sim, last_submit)
            self._after_submit(sim)
            return
        info = task.info
        self.task_id = task.task_id
        self.approve_set = tuple(info["approves"])
        self.iteration_no = info["iteration"]
        if last_round is None:
            self._open_round(sim, 0, self.shard.store.get_params(task.params_hash), 0)
        else:
            self._open_round(sim, last_round.round_no, self.shard.store.get_params(last_round.params_hash),
                             last_round.info["attempt"] + 1)

    # -- iteration ----------------------------------------------------------

    def start_iteration(self, sim) -> None:
        if self.node.stop_requested:
            self._halt(sim)
            return
        from .mainchain import TipsRequest

        self.awaiting_tips = True
        self.log(sim, "tips_request", iteration=self.iteration_no)
        sim.send(self.node_id, self.shard.mainchain_id,
                 TipsRequest(self.shard.shard_id, self.node_id, self.spec.eta, self.iteration_no == 0),
                 link="shard_to_mainchain")

    def on_tips(self, sim, tips) -> None:
        if not self.awaiting_tips:
            return
        self.awaiting_tips = False
        w_bim, approve_set = self.shard.tips_builder(tips)
        self.approve_set = tuple(approve_set)
        self.task_id = f"{self.spec.task_id_root}/{self.shard.shard_id}/it{self.iteration_no}"
        key = self.shard.store.put_params(w_bim)
        rec = leader_record(TASK, self.node_id, self.task_id, 0, key, sim.now,
                            approves=list(self.approve_set), iteration=self.iteration_no)
        self.log(sim, "iteration_start", task_id=self.task_id, approves=list(self.approve_set),
                 w_bim=key)
        self.propose(sim, [rec], lambda s: self._open_round(s, 0, w_bim, 0))

    def _open_round(self, sim, round_no: int, w_brm, attempt: int) -> None:
        if round_no != self.round_no or attempt == 0:
            self.retries = 0
        self.round_no = round_no
        self.attempt = attempt
        self.w_brm = w_brm
        self.w_brm_hash = self.shard.store.put_params(w_brm)
        cold = self.iteration_no == 0 and round_no == 0
        self.a_tau = round_threshold(self.spec.a_tau_policy, w_brm, self.shard.test_set,
                                     self.spec.loss_kind, cold_start=cold)
        statuses = [d.status(sim.now) for d in self.shard.devices.values()]
        selected = select_devices(statuses, self.cfg.s_d, sim.rng("subchain.select", self.shard.shard_id),
                                  self.cfg.batt_min, self.cfg.net_min)
        if selected is None:
            self.log(sim, "round_postponed", round_no=round_no)
            sim.set_timer(self.node_id, "postpone", self.cfg.postpone_delay,
                          (self.term, round_no, attempt))
            return
        self.selected = selected
        rec = leader_record(ROUND_MODEL, self.node_id, self.task_id, round_no, self.w_brm_hash, sim.now,
                            attempt=attempt, a_tau=self.a_tau, selected=list(selected))
        self.propose(sim, [rec], lambda s: self._trigger_devices(s))

    def _trigger_devices(self, sim) -> None:
        from .device import TrainRequest

        self.uploads = set()
        self.valid = {}
        self.round_open = True
        self.closing = None
        self.log(sim, "round_start", task_id=self.task_id, round_no=self.round_no, attempt=self.attempt,
                 a_tau=self.a_tau, selected=list(self.selected), w_brm=self.w_brm_hash)
        req = TrainRequest(self.shard.shard_id, self.task_id, self.round_no, self.attempt,
                           self.w_brm_hash, self.responsive(sim))
        for dev in self.selected:
            sim.send(self.node_id, dev, req)
        self._round_timer = sim.set_timer(self.node_id, "round_timeout", self.spec.round_timeout,
                                          (self.term, self.task_id, self.round_no, self.attempt))
        # txs that reached this node before the round record committed
        early, self.node.buffered = self.node.buffered, []
        for tx in early:
            self.on_device_tx(sim, tx, self.node_id)

    def on_device_tx(self, sim, tx: SubchainTx, via: str) -> None:
        if not self.round_open:
            if self.task_id is not None and (tx.task_id, tx.round_no) == (self.task_id, self.round_no):
                self.node.buffered.append(tx)
            return
        if (tx.task_id, tx.round_no) != (self.task_id, self.round_no) or tx.sender_id not in self.selected:
            return
        verdict = validate_tx(tx, self.shard.test_set, self.a_tau, self.shard.store, self.spec.loss_kind)
        sim.trace.log(sim.now, self.node_id, "verdict", sender=tx.sender_id, task_id=tx.task_id,
                      round_no=tx.round_no, status=verdict.status, reason=verdict.reason,
                      score=verdict.score, a_tau=self.a_tau)
        self._record(sim, tx, verdict.valid)

    def _record(self, sim, tx: SubchainTx, valid: bool) -> None:
        if tx.sender_id in self.uploads:
            return
        self.uploads.add(tx.sender_id)
        if valid:
            self.valid[tx.sender_id] = tx
            self.pending.append(tx)
            self._maybe_form_block(sim, period_fired=False)
        if len(self.uploads) == len(self.selected):
            self._close_round(sim, timed_out=False)

    def _close_round(self, sim, timed_out: bool) -> None:
        self.round_open = False
        if self._round_timer is not None:
            self._round_timer.cancel()
            self._round_timer = None
        quorum = quorum_size(self.spec.quorum_fraction, len(self.selected))
        if len(self.uploads) < quorum:
            self.retries += 1
            self.log(sim, "round_abandon", task_id=self.task_id, round_no=self.round_no,
                     attempt=self.attempt, uploads=len(self.uploads), quorum=quorum)
            if self.retries > self.cfg.max_retries:
                raise IterationError(
                    f"{self.shard.shard_id}: round {self.round_no} of {self.task_id} abandoned "
                    f"{self.retries} times", trace_ref=len(sim.trace.records) - 1)
            self._open_round(sim, self.round_no, self.w_brm, self.attempt + 1)
            return
        self.closing = {tx.tx_id for tx in self.valid.values()}
        self._maybe_form_block(sim, period_fired=True)
        self._maybe_finish_round(sim)

    def _maybe_finish_round(self, sim) -> None:
        if self.closing is None or not self.closing <= self.tx_committed:
            return
        self.closing = None
        valid = []
        for sender in sorted(self.valid):
            tx = self.valid[sender]
            valid.append((sender, self.shard.store.get_params(tx.params_hash), tx.n_samples))
        w_s = aggregate_valid(valid, self.w_brm)
        self.shard.instrumentation.append({
            "shard": self.shard.shard_id, "task_id": self.task_id, "round_no": self.round_no,
            "senders": [v[0] for v in valid], "weights": [v[2] for v in valid],
        })
        self.log(sim, "round_commit", task_id=self.task_id, round_no=self.round_no, attempt=self.attempt,
                 valid=[v[0] for v in valid], weights=[v[2] for v in valid],
                 uploads=len(self.uploads))
        if self.round_no + 1 < self.spec.R:
            self._open_round(sim, self.round_no + 1, w_s, 0)
            return
        key = self.shard.store.put_params(w_s)
        mtx = self.shard.make_mainchain_tx(self.shard.shard_id, self.task_id, key, self.approve_set, sim.now)
        rec = leader_record(SHARD_MODEL, self.node_id, self.task_id, self.round_no, key, sim.now,
                            mainchain_tx=mtx.to_dict())
        self.propose(sim, [rec], lambda s: self._submit(s, rec))

    def _submit(self, sim, rec: SubchainTx) -> None:
        self._send_submission(sim, rec)
        self._after_submit(sim)

    def _send_submission(self, sim, rec: SubchainTx) -> None:
        from .mainchain import MainchainTx, Submit

        mtx = MainchainTx.from_dict(rec.info["mainchain_tx"])
        self.log(sim, "shard_submit", task_id=rec.task_id, tx_id=mtx.tx_id, approves=list(mtx.approves))
        sim.send(self.node_id, self.shard.mainchain_id, Submit(mtx), link="shard_to_mainchain")

    def _after_submit(self, sim) -> None:
        self.shard.iterations_done += 1
        self.iteration_no += 1
        self.task_id = None
        self.start_iteration(sim)

    def _halt(self, sim) -> None:
        self.shard.halted = True
        self.log(sim, "shard_halt", iterations=self.shard.iterations_done)

    # -- block pipeline -----------------------------------------------------

    def propose(self, sim, records: list, callback) -> None:
        self.queue.append((records, callback))
        self._pump(sim)

    def _maybe_form_block(self, sim, period_fired: bool) -> None:
        if not self.pending:
            return
        if len(self.pending) >= self.cfg.block_threshold or period_fired:
            txs, self.pending = self.pending, []
            self.queue.append((txs, None))
            self._pump(sim)

    def _pump(self, sim) -> None:
        if self.inflight is not None or not self.queue or not self.ready:
            return
        txs, callback = self.queue.pop(0)
        block = form_block(txs, block_no=len(self.node.log), prev_hash=self.node.last_hash,
                           leader_id=self.node_id, term=self.term, threshold=1)
        self.node.log.append(block)
        self.node._absorb(block)
        timer = sim.set_timer(self.node_id, "replication_timeout", self.cfg.replication_timeout,
                              (self.term, block.block_hash))
        self.inflight = (block, callback, set(), timer)
        msg = AppendBlock(self.term, self.node_id, block, self.node.commit_index)
        for f in self._followers():
            sim.send(self.node_id, f, msg)

    def _on_ack(self, sim, ack: AppendAck) -> None:
        if self.inflight is None:
            return
        block, callback, acks, timer = self.inflight
        if ack.block_hash != block.block_hash:
            return
        acks.add(ack.node_id)
        if len(acks) < commit_quorum(self.cfg.b):
            return
        timer.cancel()
        self.inflight = None
        committed = replace(block, commit_votes=len(acks))
        self.node.log[block.block_no] = committed
        self.node.mark_committed(block.block_no + 1)
        self.tx_committed.update(tx.tx_id for tx in block.txs)
        self.log(sim, "block_commit", block_no=block.block_no, block_hash=block.block_hash,
                 n_txs=len(block.txs), acks=len(acks))
        hb = Heartbeat(self.term, self.node_id, self.node.commit_index, len(self.node.log), self.node.last_hash)
        for f in self._followers():
            sim.send(self.node_id, f, hb)
        if callback is not None:
            callback(sim)
        self._maybe_finish_round(sim)
        self._pump(sim)

    def _on_replication_timeout(self, sim, block_hash: str) -> None:
        if self.inflight is None or self.inflight[0].block_hash != block_hash:
            return
        block, callback, acks, _ = self.inflight
        self.inflight = None
        del self.node.log[block.block_no:]
        self.log(sim, "replicate_failed", block_no=block.block_no, acks=len(acks))
        # txs go back to the front of the queue for another attempt
        self.queue.insert(0, (list(block.txs), callback))
        sim.set_timer(self.node_id, "retry_replication", self.cfg.heartbeat_interval, self.term)

    # -- dispatch -----------------------------------------------------------

    def on_message(self, sim, src, msg) -> None:
        from .mainchain import TipsResponse

        if src in self.shard.by_id and src != self.node_id:
            self.heard[src] = sim.now
        if isinstance(msg, AppendAck):
            if msg.term == self.term:
                self._on_ack(sim, msg)
        elif isinstance(msg, Forward):
            if self.round_open and (msg.tx.task_id, msg.tx.round_no) == (self.task_id, self.round_no) \
                    and msg.tx.sender_id in self.selected:
                self._record(sim, msg.tx, msg.valid)
        elif isinstance(msg, SyncAck):
            if msg.term == self.term and msg.log_len == len(self.node.log):
                self._on_synced(sim, msg.node_id)
        elif isinstance(msg, SyncRequest):
            sim.send(self.node_id, msg.node_id,
                     Sync(self.term, self.node_id, tuple(self.node.log), self.node.commit_index))
        elif isinstance(msg, TipsResponse):
            self.on_tips(sim, msg.tips)
        elif isinstance(msg, (AppendBlock, Heartbeat, Sync)) and msg.term > self.term:
            # a newer leader exists
            self.node.role = FOLLOWER
            self.node.leader = None
            self.node.arm_election_timer(sim)
            self.node.on_message(sim, src, msg)

    def on_timer(self, sim, tag, payload) -> None:
        if tag == "heartbeat":
            if payload != self.term or self.shard.halted:
                return
            hb = Heartbeat(self.term, self.node_id, self.node.commit_index, len(self.node.log), self.node.last_hash)
            for f in self._followers():
                sim.send(self.node_id, f, hb)
            sim.set_timer(self.node_id, "heartbeat", self.cfg.heartbeat_interval, self.term)
        elif tag == "block_period":
            if payload != self.term or self.shard.halted:
                return
            self._maybe_form_block(sim, period_fired=True)
            sim.set_timer(self.node_id, "block_period", self.cfg.block_period, self.term)
        elif tag == "sync_timeout":
            if payload == self.term and not self.ready:
                self._broadcast_sync(sim)
        elif tag == "replication_timeout":
            term, block_hash = payload
            if term == self.term:
                self._on_replication_timeout(sim, block_hash)
        elif tag == "retry_replication":
            if payload == self.term:
                self._pump(sim)
        elif tag == "round_timeout":
            term, task_id, round_no, attempt = payload
            if self.round_open and (term, task_id, round_no, attempt) == \
                    (self.term, self.task_id, self.round_no, self.attempt):
                self._close_round(sim, timed_out=True)
        elif tag == "postpone":
            term, round_no, attempt = payload
            if term == self.term:
                self._open_round(sim, round_no, self.w_brm, attempt)
