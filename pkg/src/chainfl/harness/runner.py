"""Scenario wiring for ChainFL and the two baselines.

All three paradigms draw from the same seeded task, partition, shard pools
and device behaviours, and a device's k-th local training uses the same
random stream everywhere, so cross-paradigm comparisons are data-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..device import (
    DeviceAgent,
    DeviceProfile,
    GaussianNoise,
    Honest,
    Malicious,
    Scale,
    SignFlip,
    Straggler,
    attack_rng,
    delivery_delay,
    local_model,
    training_rng,
)
from ..errors import NumericOverflowError
from ..fl_task import (
    NON_IID_SORTED,
    generate_synthetic_classification,
    generate_synthetic_regression,
    policy_from_json,
)
from ..mainchain import (
    DagLedger,
    MainchainNode,
    MainchainTx,
    aggregate_global,
    build_basic_iteration_model,
    check_stop,
    make_mainchain_tx,
)
from ..model_math import ACCURACY, LOSS, HyperParams, accuracy, asynfl_update, evaluate_loss, weighted_aggregate
from ..simnet import LatencyModel, Simulator, Trace, Uniform, rng_stream
from ..store import MemoryStore
from ..subchain import Shard, ShardConfig, StopSignal, select_devices
from .config import ScenarioConfig
from .metrics import MetricsRow, emit_metrics

SELECT_STREAM = "subchain.select"


def shard_name(i: int) -> str:
    return f"s{i}"


# --------------------------------------------------------------------------
# shared scenario pieces


def build_task(cfg: ScenarioConfig):
    t = cfg.task
    hp = HyperParams(cfg.mu, cfg.E, cfg.B)
    if t["kind"] == "regression":
        task = generate_synthetic_regression(cfg.seed, t.get("n_devices", 60), t.get("samples_per_device", 20),
                                             t.get("dim", 5), t.get("noise_sd", 0.0), hp)
    else:
        task = generate_synthetic_classification(cfg.seed, t.get("n_devices", 60), t.get("samples_per_device", 20),
                                                 t.get("dim", 5), t.get("n_classes", 4), t.get("separation", 4.0),
                                                 hp, t.get("partition", NON_IID_SORTED))
    termination = policy_from_json(cfg.termination) if cfg.termination else task.spec.termination
    spec = task.spec.with_(R=cfg.R, eta=cfg.eta, lam=cfg.lam, a_tau_policy=policy_from_json(cfg.a_tau),
                           termination=termination, round_timeout=cfg.resolved_round_timeout(),
                           quorum_fraction=cfg.quorum_fraction)
    return task, spec


def _attack(cfg: ScenarioConfig):
    a = cfg.attack
    if a["kind"] == "gaussian_noise":
        return GaussianNoise(a["sd"])
    if a["kind"] == "sign_flip":
        return SignFlip()
    return Scale(a["factor"])


def _count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 0.5))


@dataclass
class Population:
    profiles: dict
    behaviours: dict
    pools: list

    @property
    def device_ids(self) -> list:
        return sorted(self.profiles)

    def malicious(self) -> list:
        return sorted(d for d, b in self.behaviours.items() if isinstance(b, Malicious))


def build_population(cfg: ScenarioConfig, task) -> Population:
    """Disjoint shard pools and per-pool malicious / straggler assignment."""
    ids = task.plan.device_ids
    perm = rng_stream(cfg.seed, "harness", "pools").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    base, extra = divmod(len(ids), cfg.M)
    pools, start = [], 0
    for i in range(cfg.M):
        size = base + (1 if i < extra else 0)
        pools.append(tuple(sorted(shuffled[start:start + size])))
        start += size
    profiles = {d: DeviceProfile(d, task.plan.assignments[d], compute_delay=cfg.compute_delay) for d in ids}
    behaviours = {d: Honest() for d in ids}
    attack = _attack(cfg)
    for i, pool in enumerate(pools):
        order = rng_stream(cfg.seed, "harness", f"behaviour/pool-{i}").permutation(len(pool))
        n_mal = _count(cfg.M_d, len(pool))
        n_str = min(_count(cfg.straggler_ratio, len(pool)), len(pool) - n_mal)
        for rank, j in enumerate(order):
            if rank < n_mal:
                behaviours[pool[j]] = Malicious(attack)
            elif rank < n_mal + n_str:
                behaviours[pool[j]] = Straggler(cfg.straggler_delay)
    return Population(profiles, behaviours, pools)


def make_agents(pop: Population, spec, store, seed: int) -> dict:
    return {d: DeviceAgent(pop.profiles[d], pop.behaviours[d], spec, store, seed) for d in pop.device_ids}


class Evaluator:
    def __init__(self, task, spec):
        self.test = task.test_set
        self.train = task.plan.pooled()
        self.loss_kind = spec.loss_kind
        self.kind = ACCURACY if self.test.is_classification else LOSS

    def __call__(self, w) -> tuple:
        if self.kind == ACCURACY:
            metric = accuracy(w, self.test).value
        else:
            metric = self._loss(w, self.test)
        return metric, self._loss(w, self.train)

    def _loss(self, w, ds) -> float:
        try:
            return evaluate_loss(w, ds, self.loss_kind).value
        except NumericOverflowError:
            return math.inf


def latency_model(cfg: ScenarioConfig) -> LatencyModel:
    return LatencyModel(Uniform(*cfg.intra_bounds()), Uniform(*cfg.mainchain_bounds()))


@dataclass
class RunResult:
    config: ScenarioConfig
    rows: list
    trace: Trace
    final_params: np.ndarray = field(repr=False)
    sim_time: float = 0.0
    ledger: Optional[DagLedger] = None
    shards: list = field(default_factory=list)
    agents: dict = field(default_factory=dict)
    planted: list = field(default_factory=list)
    mainchain: Optional[MainchainNode] = None
    stopped: bool = False

    @property
    def gradients(self) -> int:
        return sum(a.completed for a in self.agents.values()) * self.config.E

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": emit_metrics(self.rows, out / "metrics.csv"),
                 "trace": out / "trace.jsonl", "events": out / "events.jsonl"}
        self.trace.write(paths["trace"], paths["events"])
        if self.ledger is not None:
            paths["dag"] = out / "dag.jsonl"
            self.ledger.export(paths["dag"])
        return paths


# --------------------------------------------------------------------------
# ChainFL


class Contract:
    """Observer that evaluates the global model and issues the stop signal.

    It counts accepted shard submissions and evaluates after every
    ``period`` of them, which for ``M`` shards is about one shard-iteration.
    """

    def __init__(self, cfg: ScenarioConfig, spec, ledger, store, evaluator, agents, shards):
        self.cfg = cfg
        self.spec = spec
        self.ledger = ledger
        self.store = store
        self.evaluate = evaluator
        self.agents = agents
        self.shards = shards
        self.rows: list = []
        self.submissions = 0
        self.epoch = 0
        self.stopped = False
        self.last_params = spec.init_params

    def gradients(self) -> int:
        return sum(a.completed for a in self.agents.values()) * self.cfg.E

    def emit(self, sim, w) -> bool:
        metric, loss = self.evaluate(w)
        grads = self.gradients()
        self.rows.append(MetricsRow("ChainFL", self.cfg.seed, self.epoch, grads, sim.now,
                                    self.evaluate.kind, metric, loss))
        self.last_params = w
        sim.trace.log(sim.now, "contract", "evaluate", epoch=self.epoch, gradients=grads, metric=metric)
        return check_stop(self.spec.termination, epoch=self.epoch, gradients=grads, metric=metric) \
            or self.epoch >= self.cfg.max_global_epochs

    def on_submission(self, sim, tx: MainchainTx) -> None:
        if self.stopped:
            return
        self.submissions += 1
        if self.submissions % self.cfg.evaluation_period:
            return
        self.epoch += 1
        w = aggregate_global(self.ledger, self.cfg.lambda_global, self.evaluate.test, self.store,
                             self.spec.loss_kind, sim.now)
        if self.emit(sim, w):
            self.stopped = True
            sim.trace.log(sim.now, "contract", "stop", epoch=self.epoch)
            for shard in self.shards:
                for node in shard.node_ids:
                    sim.send("contract", node, StopSignal(), link="shard_to_mainchain")

    def on_message(self, sim, src, msg):
        pass


class Adversary:
    """Submits noise models straight into the DAG at configured times.

    Each planted transaction approves an already-approved vertex, so it
    joins the tip set without displacing any honest tip.
    """

    def __init__(self, mainchain: MainchainNode, store, dim: int, sd: float):
        self.mainchain = mainchain
        self.store = store
        self.dim = dim
        self.sd = sd
        self.planted: list = []

    def on_timer(self, sim, tag, payload):
        ledger = self.mainchain.ledger
        w = sim.rng("adversary", "planted").normal(scale=self.sd, size=self.dim)
        key = self.store.put_params(w)
        tx = MainchainTx("adversary", f"planted-{payload}", key, (ledger.latest_approved(),), sim.now)
        if self.mainchain.accept(sim, tx, notify=False):
            self.planted.append(tx.tx_id)
            sim.trace.log(sim.now, "adversary", "planted", tx_id=tx.tx_id)

    def on_message(self, sim, src, msg):
        pass


class FaultInjector:
    """Resolves symbolic targets such as ``s0:leader`` when the fault fires."""

    def __init__(self, shards: dict):
        self.shards = shards

    def on_timer(self, sim, tag, payload):
        shard_id = payload.split(":")[0]
        shard = self.shards[shard_id]
        leader = shard.leader_node(sim)
        if leader is not None:
            sim.inject_fault([(sim.now, tag, leader.node_id)])

    def on_message(self, sim, src, msg):
        pass


def run_chainfl(cfg: ScenarioConfig) -> RunResult:
    task, spec = build_task(cfg)
    store = MemoryStore()
    test_key = store.put_dataset(task.test_set)
    init_key = store.put_params(spec.init_params)
    pop = build_population(cfg, task)
    agents = make_agents(pop, spec, store, cfg.seed)
    evaluator = Evaluator(task, spec)
    sim = Simulator(cfg.seed, latency_model(cfg))

    ledger = DagLedger(cfg.resolved_freshness(), cfg.candidacy_policy)
    ledger.create_genesis(spec, test_key, init_key, now=0.0)
    mainchain = MainchainNode(ledger)
    sim.register(mainchain.entity_id, mainchain)

    def tips_builder(tips):
        built = build_basic_iteration_model(tips, spec.lam, task.test_set, store, spec.loss_kind)
        return built.w_bim, built.approve_set

    shard_cfg = ShardConfig(b=cfg.b, s_d=cfg.S_d, **cfg.shard)
    shards = []
    for i, pool in enumerate(pop.pools):
        shard = Shard(shard_name(i), spec, shard_cfg, [agents[d] for d in pool], task.test_set, store,
                      mainchain.entity_id, tips_builder, make_mainchain_tx)
        shard.register(sim)
        shards.append(shard)
    for agent in agents.values():
        sim.register(agent.device_id, agent)

    contract = Contract(cfg, spec, ledger, store, evaluator, agents, shards)
    sim.register("contract", contract)
    mainchain.listeners.append(contract.on_submission)
    contract.emit(sim, spec.init_params)

    adversary = None
    if cfg.planted.get("times"):
        adversary = Adversary(mainchain, store, spec.model_dim, cfg.planted.get("sd", 10.0))
        sim.register("adversary", adversary)
        for k, t in enumerate(cfg.planted["times"]):
            sim.set_timer("adversary", "plant", float(t), k)

    injector = FaultInjector({s.shard_id: s for s in shards})
    sim.register("faults", injector)
    for t, kind, target in cfg.faults:
        if target.endswith(":leader"):
            sim.set_timer("faults", kind, float(t), target)
        else:
            sim.inject_fault([(t, kind, target)])

    for shard in shards:
        shard.start(sim)
    sim.run_until(lambda: all(s.quiescent(sim) for s in shards), t_max=cfg.t_max)
    return RunResult(cfg, contract.rows, sim.trace, contract.last_params, sim.now, ledger, shards, agents,
                     adversary.planted if adversary else [], mainchain, contract.stopped)


# --------------------------------------------------------------------------
# baselines


def _base_row(cfg, epoch, grads, t, evaluator, w, paradigm) -> tuple:
    metric, loss = evaluator(w)
    return MetricsRow(paradigm, cfg.seed, epoch, grads, t, evaluator.kind, metric, loss), metric


def _should_stop(cfg, spec, epoch, grads, metric) -> bool:
    return check_stop(spec.termination, epoch=epoch, gradients=grads, metric=metric) \
        or epoch >= cfg.max_global_epochs


def run_fedavg(cfg: ScenarioConfig) -> RunResult:
    """Synchronous centralized loop over the union of the shard pools.

    Selection uses the first shard's stream so a one-shard ChainFL run with
    validation disabled replays exactly the same sequence of models.
    """
    task, spec = build_task(cfg)
    store = MemoryStore()
    pop = build_population(cfg, task)
    agents = make_agents(pop, spec, store, cfg.seed)
    evaluator = Evaluator(task, spec)
    trace = Trace()
    select_rng = rng_stream(cfg.seed, SELECT_STREAM, shard_name(0))
    lat_rng = rng_stream(cfg.seed, "latency", "fedavg")
    lat = latency_model(cfg).intra_shard

    w = spec.init_params
    t = 0.0
    row, metric = _base_row(cfg, 0, 0, t, evaluator, w, "FedAvg")
    rows = [row]
    epoch = grads = 0
    while not _should_stop(cfg, spec, epoch, grads, metric):
        epoch += 1
        selected = select_devices([a.status(t) for a in agents.values()], cfg.S_d, select_rng)
        updates, slowest = [], 0.0
        for dev in selected:
            agent = agents[dev]
            k = agent.trainings
            agent.trainings += 1
            params = local_model(agent.profile, agent.behavior, w, spec, training_rng(cfg.seed, dev, k),
                                 attack_rng(cfg.seed, dev, k))
            agent.completed += 1
            updates.append((params, agent.profile.dataset.size))
            rtt = lat.sample(lat_rng) + lat.sample(lat_rng)
            slowest = max(slowest, rtt + delivery_delay(agent.profile, agent.behavior, cfg.E))
        w = weighted_aggregate(updates)
        grads += len(selected) * cfg.E
        t += slowest
        trace.log(t, "server", "aggregate", epoch=epoch, selected=list(selected))
        row, metric = _base_row(cfg, epoch, grads, t, evaluator, w, "FedAvg")
        rows.append(row)
    return RunResult(cfg, rows, trace, w, t, agents=agents, stopped=True)


class AsynServer:
    """Keeps ``S_d`` devices busy; every arrival is folded in at half weight."""

    def __init__(self, cfg, spec, agents, evaluator):
        self.cfg = cfg
        self.spec = spec
        self.agents = agents
        self.evaluate = evaluator
        self.w = spec.init_params
        self.busy: set = set()
        self.arrivals = 0
        self.grads = 0
        self.stopped = False
        self.rows: list = []

    def start(self, sim) -> None:
        row, metric = _base_row(self.cfg, 0, 0, sim.now, self.evaluate, self.w, "AsynFL")
        self.rows.append(row)
        if _should_stop(self.cfg, self.spec, 0, 0, metric):
            self.stopped = True
            return
        for _ in range(self.cfg.S_d):
            self.launch(sim)

    def launch(self, sim) -> None:
        idle = [a.status(sim.now) for a in self.agents.values() if a.device_id not in self.busy]
        picked = select_devices(idle, 1, sim.rng("asynfl.select", "server"))
        if picked is None:
            return
        dev = picked[0]
        agent = self.agents[dev]
        self.busy.add(dev)
        k = agent.trainings
        agent.trainings += 1
        params = local_model(agent.profile, agent.behavior, self.w, self.spec, training_rng(self.cfg.seed, dev, k),
                             attack_rng(self.cfg.seed, dev, k))
        lat = sim.latency.intra_shard
        rng = sim.rng("latency", dev)
        delay = lat.sample(rng) + delivery_delay(agent.profile, agent.behavior, self.cfg.E) + lat.sample(rng)
        sim.set_timer("server", "arrival", delay, (dev, params))

    def on_timer(self, sim, tag, payload):
        dev, params = payload
        self.busy.discard(dev)
        if self.stopped:
            return
        self.agents[dev].completed += 1
        self.w = asynfl_update(self.w, params)
        self.arrivals += 1
        self.grads += self.cfg.E
        sim.trace.log(sim.now, "server", "arrival", device=dev, epoch=self.arrivals)
        row, metric = _base_row(self.cfg, self.arrivals, self.grads, sim.now, self.evaluate, self.w, "AsynFL")
        self.rows.append(row)
        if _should_stop(self.cfg, self.spec, self.arrivals, self.grads, metric):
            self.stopped = True
            return
        self.launch(sim)

    def on_message(self, sim, src, msg):
        pass


def run_asynfl(cfg: ScenarioConfig) -> RunResult:
    task, spec = build_task(cfg)
    store = MemoryStore()
    pop = build_population(cfg, task)
    agents = make_agents(pop, spec, store, cfg.seed)
    sim = Simulator(cfg.seed, latency_model(cfg))
    server = AsynServer(cfg, spec, agents, Evaluator(task, spec))
    sim.register("server", server)
    server.start(sim)
    sim.run_until(lambda: server.stopped, t_max=cfg.t_max)
    return RunResult(cfg, server.rows, sim.trace, server.w, sim.now, agents=agents, stopped=server.stopped)


RUNNERS = {"ChainFL": run_chainfl, "FedAvg": run_fedavg, "AsynFL": run_asynfl}


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    return RUNNERS[cfg.paradigm](cfg)
