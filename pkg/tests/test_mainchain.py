import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainfl.errors import DoubleGenesisError, PrunedApprovalError, UnknownApprovalError
from chainfl.fl_task import MaxGlobalEpochs, MaxGradients, MetricThreshold
from chainfl.mainchain import (
    APPROVED,
    EXTEND,
    FRESH_TIP,
    PRUNED,
    DagLedger,
    MainchainTx,
    aggregate_global,
    build_basic_iteration_model,
    check_stop,
    make_mainchain_tx,
)
from chainfl.model_math import LabeledDataset, uniform_aggregate

import dagops


def _ledger(spec, store, F=math.inf, policy="indefinite"):
    led = DagLedger(F, policy)
    g0 = led.create_genesis(spec, spec.test_set_ref, store.put_params(spec.init_params), 0.0)
    return led, g0


def _submit(led, store, params, approves, now, shard="s0", task="t"):
    tx = make_mainchain_tx(shard, f"{task}@{now}", store.put_params(params), approves, now)
    assert led.submit_tx(tx, now)
    return tx


# -- genesis ------------------------------------------------------------------


def test_genesis_is_sole_tip_and_round_trips(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    assert set(led.tips) == {g0.tx_id} and g0.is_genesis
    assert led.genesis_spec().canonical_bytes() == reg_task.spec.canonical_bytes()
    with pytest.raises(DoubleGenesisError):
        led.create_genesis(reg_task.spec, "x", "y")


def test_genesis_id_is_deterministic(reg_task, store):
    a, _ = _ledger(reg_task.spec, store)
    b, _ = _ledger(reg_task.spec, store)
    assert a.genesis_id == b.genesis_id


# -- tips ---------------------------------------------------------------------


def test_first_request_returns_genesis(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    got = led.request_tips(3, 0.0, np.random.default_rng(0), first=True)
    assert [t.tx_id for t in got] == [g0.tx_id]
    assert led.records[g0.tx_id].candidacy_count == 1


def test_request_samples_distinct_and_counts(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    for k in range(5):
        _submit(led, store, np.full(reg_task.spec.model_dim, k), [g0.tx_id], 1.0, shard=f"s{k}")
    got = led.request_tips(3, 2.0, np.random.default_rng(0))
    ids = [t.tx_id for t in got]
    assert len(set(ids)) == 3
    assert sorted(led.records[t].candidacy_count for t in led.tips) == [0, 0, 1, 1, 1]


def test_expired_zero_candidacy_tip_is_pruned_and_never_returned(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store, F=10.0)
    tx = _submit(led, store, np.ones(reg_task.spec.model_dim), [g0.tx_id], 0.0)
    r = np.random.default_rng(0)
    got = led.request_tips(3, 10.0, r)
    assert led.records[tx.tx_id].status == PRUNED
    assert tx.tx_id not in [t.tx_id for t in got]
    # fallback to the newest approved vertex keeps training going
    assert [t.tx_id for t in got] == [g0.tx_id]
    for _ in range(20):
        assert tx.tx_id not in [t.tx_id for t in led.request_tips(3, 20.0, r)]
    with pytest.raises(PrunedApprovalError):
        _submit(led, store, np.zeros(reg_task.spec.model_dim), [tx.tx_id], 21.0)


def test_prune_examples(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store, F=10.0)
    lone = _submit(led, store, np.ones(reg_task.spec.model_dim), [g0.tx_id], 0.0, shard="a")
    picked = _submit(led, store, np.zeros(reg_task.spec.model_dim), [g0.tx_id], 0.0, shard="b")
    led.mark_candidate(picked.tx_id, 5.0)
    assert led.prune_expired(9.999) == []
    assert led.prune_expired(10.0) == [lone.tx_id]
    assert led.prune_expired(10.0) == []
    assert led.records[picked.tx_id].status == FRESH_TIP
    assert picked.tx_id in led.selectable(1e9)
    assert lone.tx_id in led.vertices  # stored, not dropped


def test_extend_policy_expires_after_extension(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store, F=10.0, policy=EXTEND)
    tx = _submit(led, store, np.ones(reg_task.spec.model_dim), [g0.tx_id], 0.0)
    led.mark_candidate(tx.tx_id, 6.0)
    assert led.prune_expired(15.9) == []
    assert led.prune_expired(16.0) == [tx.tx_id]


def test_genesis_is_never_pruned(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store, F=1.0)
    assert led.prune_expired(100.0) == []
    assert [t.tx_id for t in led.request_tips(2, 100.0, np.random.default_rng(0))] == [g0.tx_id]


# -- submission ---------------------------------------------------------------


def test_submit_approving_genesis(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    tx = _submit(led, store, np.ones(reg_task.spec.model_dim), [g0.tx_id], 1.0)
    assert set(led.tips) == {tx.tx_id}
    assert led.records[g0.tx_id].status == APPROVED
    assert not led.submit_tx(tx, 2.0)  # duplicate


def test_concurrent_forks_accepted(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    a = _submit(led, store, np.ones(reg_task.spec.model_dim), [g0.tx_id], 1.0, shard="s0")
    b = _submit(led, store, 2 * np.ones(reg_task.spec.model_dim), [g0.tx_id], 1.0, shard="s1")
    c = _submit(led, store, 3 * np.ones(reg_task.spec.model_dim), [a.tx_id], 2.0, shard="s0")
    d = _submit(led, store, 4 * np.ones(reg_task.spec.model_dim), [b.tx_id], 2.0, shard="s1")
    assert set(led.tips) == {c.tx_id, d.tx_id} == led.recompute_tips()
    assert led.is_acyclic() and led.reaches_genesis()


def test_submit_rejections(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    with pytest.raises(UnknownApprovalError):
        led.submit_tx(MainchainTx("s0", "t", "p", ("0" * 64,), 1.0), 1.0)
    with pytest.raises(DoubleGenesisError):
        led.submit_tx(MainchainTx("s0", "t", "p", (), 1.0), 1.0)


def test_tx_id_round_trip(reg_task, store):
    tx = MainchainTx("s0", "t", "ab" * 32, ("cd" * 32,), 1.5)
    assert MainchainTx.from_dict(tx.to_dict()).tx_id == tx.tx_id
    assert len(tx.tx_id) == 64 and tx.tx_id == tx.tx_id.lower()


# -- model building -----------------------------------------------------------


def _threshold_tips(store, accuracies, ts=None):
    """Tips scoring exactly ``acc`` on an all-zero-label test set with features ``(x, 1)``, x = 1..10.

    Class 0 scores ``cut + 0.5`` via the bias and class 1 scores ``x``, so
    exactly the ``cut`` samples with ``x <= cut`` are classified correctly.
    """
    n = 10
    X = np.column_stack([np.arange(1, n + 1, dtype=float), np.ones(n)])
    test = LabeledDataset(X, np.zeros(n, dtype=int))
    txs, models = [], {}
    for k, acc in enumerate(accuracies):
        cut = round(acc * n)
        w = np.array([[0.0, 1.0], [cut + 0.5, 0.0]]).reshape(-1)
        tx = MainchainTx(f"s{k}", f"t{k}", store.put_params(w), ("g",), ts[k] if ts else float(k))
        txs.append(tx)
        models[tx.tx_id] = w
    return test, txs, models


def test_threshold_tip_construction(store):
    from chainfl.model_math import accuracy

    test, txs, models = _threshold_tips(store, [0.9, 0.8, 0.2])
    got = [accuracy(models[t.tx_id], test).value for t in txs]
    assert got == [0.9, 0.8, 0.2]


def test_build_top_lambda(store):
    test, txs, models = _threshold_tips(store, [0.2, 0.9, 0.8])
    built = build_basic_iteration_model(txs, 2, test, store, "cross_entropy")
    assert built.approve_set == (txs[1].tx_id, txs[2].tx_id)
    assert np.allclose(built.w_bim, (models[txs[1].tx_id] + models[txs[2].tx_id]) / 2)


def test_build_ties_prefer_earlier_then_id(store):
    test, txs, models = _threshold_tips(store, [0.5, 0.5, 0.5], ts=[3.0, 1.0, 1.0])
    built = build_basic_iteration_model(txs, 2, test, store, "cross_entropy")
    early = sorted([txs[1].tx_id, txs[2].tx_id])
    assert built.approve_set == tuple(early)


def test_build_from_genesis_only(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    built = build_basic_iteration_model([g0], 2, reg_task.test_set, store, "squared")
    assert built.approve_set == (g0.tx_id,)
    assert np.array_equal(built.w_bim, reg_task.spec.init_params)


def test_build_identical_models(store, reg_task):
    w = np.arange(reg_task.spec.model_dim, dtype=float)
    key = store.put_params(w)
    txs = [MainchainTx(f"s{k}", "t", key, ("g",), float(k)) for k in range(3)]
    assert np.allclose(build_basic_iteration_model(txs, 2, reg_task.test_set, store, "squared").w_bim, w)


def test_build_unresolvable_tip_never_chosen(store, reg_task):
    good = MainchainTx("s0", "t", store.put_params(np.zeros(reg_task.spec.model_dim)), ("g",), 1.0)
    ghost = MainchainTx("s1", "t", "e" * 64, ("g",), 0.0)
    built = build_basic_iteration_model([ghost, good], 2, reg_task.test_set, store, "squared")
    assert built.approve_set == (good.tx_id,) and built.unresolved == (ghost.tx_id,)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=6), st.integers(1, 5))
def test_build_matches_sort_and_average_oracle(hits, lam):
    from chainfl.store import MemoryStore

    store = MemoryStore()
    test, txs, models = _threshold_tips(store, [h / 10 for h in hits])
    built = build_basic_iteration_model(txs, lam, test, store, "cross_entropy")
    order = sorted(range(len(txs)), key=lambda k: (-hits[k], txs[k].timestamp, txs[k].tx_id))[:lam]
    assert built.approve_set == tuple(txs[k].tx_id for k in order)
    assert np.allclose(built.w_bim, uniform_aggregate([models[txs[k].tx_id] for k in order]), rtol=0, atol=1e-15)
    again = build_basic_iteration_model(txs, lam, test, store, "cross_entropy")
    assert again.w_bim.tobytes() == built.w_bim.tobytes()


# -- observer -----------------------------------------------------------------


def test_aggregate_global_single_tip(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store)
    w = np.full(reg_task.spec.model_dim, 0.5)
    _submit(led, store, w, [g0.tx_id], 1.0)
    assert np.array_equal(aggregate_global(led, 2, reg_task.test_set, store, "squared", 2.0), w)


def test_aggregate_global_is_read_only_and_equivalent(reg_task, store):
    led, g0 = _ledger(reg_task.spec, store, F=50.0)
    for k in range(4):
        _submit(led, store, np.full(reg_task.spec.model_dim, 0.1 * k), [g0.tx_id], 1.0, shard=f"s{k}")
    before = list(led.export_lines()), {t: (r.candidacy_count, r.status, r.freshness_deadline)
                                         for t, r in led.records.items()}
    w = aggregate_global(led, 2, reg_task.test_set, store, "squared", 3.0)
    after = list(led.export_lines()), {t: (r.candidacy_count, r.status, r.freshness_deadline)
                                        for t, r in led.records.items()}
    assert before == after
    tips = [led.vertices[t] for t in led.selectable(3.0)]
    ref = build_basic_iteration_model(tips, 2, reg_task.test_set, store, "squared").w_bim
    assert w.tobytes() == ref.tobytes()


def test_check_stop_examples():
    assert check_stop(MetricThreshold("accuracy", 0.95), epoch=3, gradients=0, metric=0.96)
    assert not check_stop(MetricThreshold("accuracy", 0.95), epoch=3, gradients=0, metric=0.90)
    assert check_stop(MaxGlobalEpochs(150), epoch=150, gradients=0, metric=0.0)
    assert not check_stop(MaxGlobalEpochs(150), epoch=149, gradients=0, metric=0.0)
    assert check_stop(MaxGradients(100), epoch=1, gradients=100, metric=0.0)
    assert check_stop(MetricThreshold("loss", 1e-3), epoch=1, gradients=0, metric=5e-4)


def test_export_lines_schema(reg_task, store):
    import json

    led, g0 = _ledger(reg_task.spec, store)
    _submit(led, store, np.ones(reg_task.spec.model_dim), [g0.tx_id], 1.0)
    recs = [json.loads(line) for line in led.export_lines()]
    assert [set(r) for r in recs] == [{"tx_id", "sender", "approves", "timestamp", "status"}] * 2
    assert recs[0]["status"] == APPROVED and recs[1]["approves"] == [g0.tx_id]


def test_dag_fuzz_small():
    dagops.fuzz(2000, seed=1)
