import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chainfl.errors import AggregationEmptyError, NumericOverflowError, ShapeMismatchError, ValidationError
from chainfl.fl_task import closed_form_optimum, generate_synthetic_regression
from chainfl.model_math import (
    HyperParams,
    LabeledDataset,
    accuracy,
    asynfl_update,
    evaluate_loss,
    get_loss,
    local_train,
    perplexity,
    sgd_step,
    uniform_aggregate,
    validation_score,
    weighted_aggregate,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class HalfSquare:
    """f(w) = 0.5 * |w|^2 regardless of the data."""

    def per_sample(self, w, X, y):
        return np.full(X.shape[0], 0.5 * float(w @ w))

    def gradient(self, w, X, y):
        return np.array(w, dtype=float)


def _one_sample():
    return LabeledDataset(np.zeros((1, 1)), np.zeros(1))


# -- sgd_step ---------------------------------------------------------------


def test_sgd_step_half_square():
    assert np.allclose(sgd_step([1.0], _one_sample(), 0.1, HalfSquare()), [0.9])


def test_sgd_step_zero_mu_is_identity():
    ds = LabeledDataset([[1.0], [2.0]], [2.0, 4.0])
    w = np.array([0.7])
    assert np.array_equal(sgd_step(w, ds, 0.0, "squared"), w)


def test_sgd_step_hand_gradient_regression():
    ds = LabeledDataset([[1.0], [2.0]], [2.0, 4.0])
    assert np.allclose(sgd_step([0.0], ds, 0.1, "squared"), [1.0], atol=1e-15)


def test_sgd_step_leaves_input_untouched():
    w = np.array([0.3, -0.2])
    before = w.copy()
    sgd_step(w, LabeledDataset([[1.0, 2.0]], [1.0]), 0.5, "squared")
    assert np.array_equal(w, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sgd_step_overflow_rejected():
    ds = LabeledDataset([[1e300]], [0.0])
    with pytest.raises(NumericOverflowError):
        sgd_step([1e300], ds, 1.0, "squared")


def test_sgd_step_empty_batch():
    with pytest.raises(ValidationError):
        sgd_step([0.0], LabeledDataset(np.zeros((0, 1)), np.zeros(0)), 0.1, "squared")


def _finite_difference(loss, w, X, y, h=1e-5):
    g = np.zeros_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (loss.per_sample(w + e, X, y).mean() - loss.per_sample(w - e, X, y).mean()) / (2 * h)
    return g


@pytest.mark.parametrize("kind", ["squared", "cross_entropy"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    loss = get_loss(kind)
    for _ in range(50):
        n, d = rng.integers(1, 8), rng.integers(1, 5)
        X = rng.normal(size=(n, d))
        if kind == "squared":
            y, w = rng.normal(size=n), rng.normal(size=d)
        else:
            c = int(rng.integers(2, 4))
            y, w = rng.integers(0, c, size=n), rng.normal(size=d * c)
        mu = 0.1
        step = (np.asarray(w) - sgd_step(w, LabeledDataset(X, y), mu, kind)) / mu
        fd = _finite_difference(loss, np.asarray(w, float), X, y)
        assert np.linalg.norm(step - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


# -- local_train ------------------------------------------------------------


def test_local_train_single_full_batch_equals_sgd_step(reg_task):
    ds = reg_task.plan.assignments[reg_task.plan.device_ids[0]]
    hp = HyperParams(0.05, 1, ds.size)
    w0 = np.linspace(-1, 1, ds.n_features)
    out = local_train(w0, ds, hp, np.random.default_rng(0), "squared")
    assert np.array_equal(out, sgd_step(w0, ds, 0.05, "squared"))


def test_local_train_replay_identical(reg_task):
    ds = reg_task.plan.pooled()
    hp = HyperParams(0.05, 3, 7)
    a = local_train(np.zeros(ds.n_features), ds, hp, np.random.default_rng(9), "squared")
    b = local_train(np.zeros(ds.n_features), ds, hp, np.random.default_rng(9), "squared")
    assert a.tobytes() == b.tobytes()


def test_local_train_tail_batch_is_trained():
    # 3 samples with B=2 gives two steps per epoch; compare against a manual loop
    X = np.array([[1.0], [2.0], [3.0]])
    y = np.array([1.0, 2.0, 3.0])
    ds = LabeledDataset(X, y)
    rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
    out = local_train([0.0], ds, HyperParams(0.01, 1, 2), rng_a, "squared")
    order = rng_b.permutation(3)
    w = sgd_step([0.0], ds.subset(np.sort(order[:2])), 0.01, "squared")
    w = sgd_step(w, ds.subset(order[2:]), 0.01, "squared")
    assert np.array_equal(out, w)


def test_local_train_reaches_closed_form_optimum():
    task = generate_synthetic_regression(11, 4, 25, 5, 0.0)
    ds = task.plan.pooled()
    out = local_train(np.zeros(5), ds, HyperParams(0.05, 50, 10), np.random.default_rng(0), "squared")
    assert np.max(np.abs(out - closed_form_optimum(task.oracle))) <= 1e-3


# -- aggregation ------------------------------------------------------------


def test_weighted_aggregate_examples():
    assert np.allclose(weighted_aggregate([([1, 0], 2), ([0, 1], 2)]), [0.5, 0.5])
    assert np.allclose(weighted_aggregate([([3, 3], 5)]), [3, 3])
    assert np.allclose(weighted_aggregate([([2, 2], 1), ([0, 0], 3)]), [0.5, 0.5])


def test_weighted_aggregate_errors():
    with pytest.raises(AggregationEmptyError):
        weighted_aggregate([])
    with pytest.raises(ShapeMismatchError):
        weighted_aggregate([([1, 2], 1), ([1], 1)])
    with pytest.raises(ValidationError):
        weighted_aggregate([([1, 2], 0)])
    with pytest.raises(NumericOverflowError):
        weighted_aggregate([([math.nan], 1)])


def test_uniform_aggregate_examples():
    assert np.allclose(uniform_aggregate([[1, 0], [0, 1]]), [0.5, 0.5])
    assert np.allclose(uniform_aggregate([[2.5, -1]]), [2.5, -1])
    assert np.allclose(uniform_aggregate([[1, 2], [3, 4], [5, 6]]), [3, 4])
    with pytest.raises(AggregationEmptyError):
        uniform_aggregate([])


@st.composite
def model_sets(draw, max_models=6):
    dim = draw(st.integers(1, 5))
    k = draw(st.integers(1, max_models))
    vecs = [draw(arrays(np.float64, dim, elements=finite)) for _ in range(k)]
    weights = [draw(st.integers(1, 1000)) for _ in range(k)]
    return list(zip(vecs, weights))


@settings(max_examples=200, deadline=None)
@given(model_sets())
def test_aggregate_in_convex_hull(models):
    out = weighted_aggregate(models)
    stacked = np.stack([w for w, _ in models])
    slack = 1e-9 * (1 + np.abs(stacked).max())
    assert np.all(out >= stacked.min(axis=0) - slack)
    assert np.all(out <= stacked.max(axis=0) + slack)


@settings(max_examples=200, deadline=None)
@given(model_sets(), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(models, rnd):
    shuffled = list(models)
    rnd.shuffle(shuffled)
    assert np.allclose(weighted_aggregate(models), weighted_aggregate(shuffled), rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(model_sets(), st.integers(1, 50))
def test_equal_weights_match_uniform(models, weight):
    vecs = [w for w, _ in models]
    out = weighted_aggregate([(w, weight) for w in vecs])
    assert np.max(np.abs(out - uniform_aggregate(vecs))) <= 1e-12


# -- metrics ----------------------------------------------------------------


def test_evaluate_loss_zero_at_noiseless_optimum(reg_task):
    w = closed_form_optimum(reg_task.oracle)
    assert evaluate_loss(w, reg_task.plan.pooled(), "squared").value <= 1e-9


def test_evaluate_loss_matches_naive_loop():
    X = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    y = np.array([1.0, 0.0, 2.0])
    w = np.array([0.2, -0.4])
    naive = sum((sum(a * b for a, b in zip(x, w)) - t) ** 2 for x, t in zip(X, y)) / 3
    assert evaluate_loss(w, LabeledDataset(X, y), "squared").value == pytest.approx(naive, abs=1e-15)


def test_cross_entropy_matches_naive_loop():
    X = np.array([[1.0, 0.5], [-1.0, 2.0]])
    y = np.array([1, 0])
    w = np.array([0.1, -0.2, 0.3, 0.4])  # 2 features x 2 classes
    W = w.reshape(2, 2)
    naive = 0.0
    for x, t in zip(X, y):
        z = x @ W
        naive += math.log(sum(math.exp(v) for v in z)) - z[t]
    assert evaluate_loss(w, LabeledDataset(X, y), "cross_entropy").value == pytest.approx(naive / 2, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_entropy_nonnegative(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(10, 3))
    y = r.integers(0, 3, size=10)
    assert evaluate_loss(r.normal(size=9) * 5, LabeledDataset(X, y), "cross_entropy").value >= 0


def _class_predictor(labels):
    # one-hot features and identity weights make predictions equal `labels`
    n_classes = 3
    X = np.eye(n_classes)[labels]
    return X, np.eye(n_classes).reshape(-1)


def test_accuracy_three_of_four():
    X, w = _class_predictor([0, 1, 2, 0])
    assert accuracy(w, LabeledDataset(X, [0, 1, 2, 1])).value == 0.75


def test_accuracy_all_correct():
    X, w = _class_predictor([0, 1, 2, 2])
    assert accuracy(w, LabeledDataset(X, [0, 1, 2, 2])).value == 1.0


def test_accuracy_counting_oracle():
    r = np.random.default_rng(3)
    X = r.normal(size=(100, 4))
    y = r.integers(0, 3, size=100)
    w = r.normal(size=12)
    W = w.reshape(4, 3)
    hits = sum(1 for x, t in zip(X, y) if int(np.argmax(x @ W)) == t)
    assert accuracy(w, LabeledDataset(X, y)).value == hits / 100


def test_accuracy_rejects_regression_labels():
    with pytest.raises(ValidationError):
        accuracy([1.0], LabeledDataset([[1.0]], [0.5]))


def test_perplexity_examples():
    assert perplexity([0.5, 0.5]).value == pytest.approx(2.0)
    assert perplexity([0.0, 1.0, 0.0]).value == pytest.approx(1.0)
    assert perplexity([0.5, 0.25, 0.25]).value == pytest.approx(2 ** 1.5)
    with pytest.raises(ValidationError):
        perplexity([0.5, 0.6])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10).filter(lambda v: sum(v) > 1e-3))
def test_perplexity_range(raw):
    p = np.array(raw) / sum(raw)
    value = perplexity(p).value
    assert 1.0 <= value <= len(raw) * (1 + 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_accuracy_range(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 30))
    v = accuracy(r.normal(size=6), LabeledDataset(r.normal(size=(n, 2)), r.integers(0, 3, size=n))).value
    assert 0.0 <= v <= 1.0


def test_validation_score_nonfinite_is_minus_inf():
    ds = LabeledDataset([[1.0]], [1.0])
    assert validation_score([math.inf], ds, "squared") == -math.inf
    assert validation_score([2.0], ds, "squared") == -1.0


# -- asynchronous rule ------------------------------------------------------


def test_asynfl_update_examples():
    assert np.array_equal(asynfl_update([1, 1], [0, 0]), [0.5, 0.5])
    w = np.array([0.3, -7.25])
    assert np.array_equal(asynfl_update(w, w), w)
    assert np.array_equal(asynfl_update([2, 4], [4, 2]), [3, 3])
    with pytest.raises(ShapeMismatchError):
        asynfl_update([1, 2], [1])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                      arrays(np.float64, n, elements=finite))))
def test_asynfl_update_bit_exact(pair):
    a, b = pair
    assert asynfl_update(a, b).tobytes() == (0.5 * a + 0.5 * b).tobytes()
