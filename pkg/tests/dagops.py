"""Random operation sequences against the DAG ledger, checked by a from-scratch oracle."""

import math
import random

import numpy as np

from chainfl.errors import PrunedApprovalError, UnknownApprovalError
from chainfl.mainchain import APPROVED, EXTEND, FRESH_TIP, INDEFINITE, PRUNED, DagLedger, MainchainTx


class StubSpec:
    task_id_root = "fuzz"

    def canonical_bytes(self):
        return b"{}"


LEGAL = {(FRESH_TIP, FRESH_TIP), (FRESH_TIP, APPROVED), (FRESH_TIP, PRUNED), (APPROVED, APPROVED), (PRUNED, PRUNED)}


def check(ledger, before):
    assert ledger.is_acyclic()
    assert ledger.reaches_genesis()
    assert set(ledger.tips) == ledger.recompute_tips()
    for tid, rec in ledger.records.items():
        assert (before.get(tid, FRESH_TIP), rec.status) in LEGAL
    return {tid: rec.status for tid, rec in ledger.records.items()}


def run_sequence(rnd: random.Random, np_rng, n_ops: int):
    ledger = DagLedger(rnd.choice([math.inf, 1.0, 3.0]), rnd.choice([INDEFINITE, EXTEND]))
    ledger.create_genesis(StubSpec(), "t", "p", 0.0)
    now = 0.0
    statuses = check(ledger, {})
    for k in range(n_ops):
        op = rnd.random()
        if op < 0.5:
            ids = list(ledger.vertices)
            parents = rnd.sample(ids, min(len(ids), rnd.randint(1, 3)))
            if rnd.random() < 0.05:
                parents.append("f" * 64)
            tx = MainchainTx(f"s{rnd.randint(0, 2)}", f"t{k}", "p", tuple(parents), now)
            bad = [UnknownApprovalError if p not in ledger.records else PrunedApprovalError
                   for p in parents if p not in ledger.records or ledger.records[p].status == PRUNED]
            try:
                ledger.submit_tx(tx, now)
                assert not bad
                assert all(ledger.records[p].status == APPROVED for p in parents)
            except (UnknownApprovalError, PrunedApprovalError) as exc:
                assert bad and type(exc) is bad[0]
                assert tx.tx_id not in ledger.vertices
        elif op < 0.75:
            got = ledger.request_tips(rnd.randint(2, 4), now, np_rng)
            ids = [t.tx_id for t in got]
            assert len(set(ids)) == len(ids)
            assert all(ledger.records[i].status != PRUNED for i in ids)
        else:
            now += rnd.uniform(0.0, 2.0)
            for tid in ledger.prune_expired(now):
                if ledger.candidacy_policy == INDEFINITE:
                    assert ledger.records[tid].candidacy_count == 0
            assert ledger.prune_expired(now) == []
        statuses = check(ledger, statuses)
    return ledger


def fuzz(n_sequences: int, seed: int = 0, max_ops: int = 6):
    rnd = random.Random(seed)
    np_rng = np.random.default_rng(seed)
    for _ in range(n_sequences):
        run_sequence(rnd, np_rng, rnd.randint(1, max_ops))
