import numpy as np
import pytest

from chainfl.device import (
    DeviceAgent,
    DeviceProfile,
    GaussianNoise,
    Honest,
    Malicious,
    Scale,
    SignFlip,
    Straggler,
    TrainRequest,
    delivery_delay,
    local_model,
    report_status,
    run_local_update,
    training_rng,
)
from chainfl.errors import ValidationError
from chainfl.fl_task import generate_synthetic_classification
from chainfl.model_math import HyperParams, local_train, sgd_step, validation_score
from chainfl.simnet import Simulator
from chainfl.subchain import round_threshold


def _device(task, i=0, **kw):
    d = task.plan.device_ids[i]
    return DeviceProfile(d, task.plan.assignments[d], **kw)


def test_status_snapshots(reg_task):
    p = _device(reg_task, battery=0.9)
    s = report_status(p, 3.0)
    assert s.eligible() and s.n_samples == p.dataset.size and s.t == 3.0
    assert report_status(p, 3.0) == s
    assert not report_status(_device(reg_task, willing=False)).eligible()
    assert not report_status(_device(reg_task, battery=0.2)).eligible(batt_min=0.5)


def test_profile_bounds(reg_task):
    with pytest.raises(ValidationError):
        _device(reg_task, battery=1.5)
    with pytest.raises(ValidationError):
        Straggler(0.0)
    with pytest.raises(ValidationError):
        GaussianNoise(0.0)


def test_honest_full_batch_is_one_sgd_step(reg_task, store):
    p = _device(reg_task)
    spec = reg_task.spec.with_(hp=HyperParams(0.05, 1, p.dataset.size))
    w = np.full(spec.model_dim, 0.25)
    tx = run_local_update(p, Honest(), w, spec, store, np.random.default_rng(0), task_id="t", round_no=2)
    assert np.array_equal(store.get_params(tx.params_hash), sgd_step(w, p.dataset, 0.05, "squared"))
    assert tx.round_no == 2 and tx.n_samples == p.dataset.size and tx.signature


def test_sign_flip_negates_trained(reg_task, store):
    p = _device(reg_task)
    w = np.zeros(reg_task.spec.model_dim)
    trained = local_train(w, p.dataset, reg_task.spec.hp, np.random.default_rng(1), "squared")
    tx = run_local_update(p, Malicious(SignFlip()), w, reg_task.spec, store, np.random.default_rng(1),
                          task_id="t", round_no=0)
    assert np.array_equal(store.get_params(tx.params_hash), -trained)
    assert tx.n_samples == p.dataset.size


def test_scale_attack(reg_task):
    p = _device(reg_task)
    w = np.zeros(reg_task.spec.model_dim)
    trained = local_model(p, Honest(), w, reg_task.spec, np.random.default_rng(2))
    scaled = local_model(p, Malicious(Scale(3.0)), w, reg_task.spec, np.random.default_rng(2))
    assert np.array_equal(scaled, 3.0 * trained)


def test_straggler_payload_equals_honest(reg_task, store):
    p = _device(reg_task, compute_delay=2.0)
    w = np.ones(reg_task.spec.model_dim)
    honest = run_local_update(p, Honest(), w, reg_task.spec, store, training_rng(0, p.device_id, 0),
                              task_id="t", round_no=0)
    slow = run_local_update(p, Straggler(7.0), w, reg_task.spec, store, training_rng(0, p.device_id, 0),
                            task_id="t", round_no=0)
    assert honest.params_hash == slow.params_hash
    assert delivery_delay(p, Honest(), 3) == 6.0
    assert delivery_delay(p, Straggler(7.0), 3) == 13.0


def test_gaussian_noise_fails_validation_in_most_seeds():
    rejected = 0
    for seed in range(10):
        task = generate_synthetic_classification(seed, 10, 20, 3, 4, scheme="IIDRandom")
        pooled = task.plan.pooled()
        w_brm = local_train(np.zeros(task.spec.model_dim), pooled, HyperParams(0.1, 3, 10),
                            np.random.default_rng(seed), "cross_entropy")
        a_tau = round_threshold(task.spec.a_tau_policy, w_brm, task.test_set, "cross_entropy", cold_start=False)
        p = _device(task)
        noisy = local_model(p, Malicious(GaussianNoise(10.0)), w_brm, task.spec, np.random.default_rng(seed))
        if not validation_score(noisy, task.test_set, "cross_entropy") > a_tau:
            rejected += 1
    assert rejected >= 9


class Inbox:
    def __init__(self):
        self.got = []

    def on_message(self, sim, src, msg):
        self.got.append((sim.now, src, msg))


def test_agent_uploads_after_delay_with_round_number(reg_task, store):
    sim = Simulator(0)
    p = _device(reg_task, compute_delay=1.5)
    agent = DeviceAgent(p, Straggler(2.0), reg_task.spec, store, seed=0)
    sim.register(p.device_id, agent)
    inbox = Inbox()
    sim.register("n0", inbox)
    key = store.put_params(np.zeros(reg_task.spec.model_dim))
    sim.send("n0", p.device_id, TrainRequest("s0", "task/it0", 3, 0, key, ("n0",)), delay=0.0)
    sim.run_until()
    (t, src, tx), = inbox.got
    assert src == p.device_id and tx.round_no == 3 and tx.task_id == "task/it0"
    assert tx.timestamp == pytest.approx(1.5 * reg_task.spec.hp.E + 2.0)
    assert agent.completed == 1 and agent.trainings == 1
    expected = local_train(np.zeros(reg_task.spec.model_dim), p.dataset, reg_task.spec.hp,
                           training_rng(0, p.device_id, 0), "squared")
    assert np.array_equal(store.get_params(tx.params_hash), expected)
