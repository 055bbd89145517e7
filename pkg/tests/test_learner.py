import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import (
    RUNNING, fd_gradient, flatten_gradient, gradient_instance, max_relative_error, mp_objective,
    running,
)
from semparse.kb import Dataset, Example, make_arith_domain, tokenize
from semparse.learner import (
    OptimizerState, TrainConfig, _Block, adagrad_step, consistent_posterior, evaluate,
    evaluate_detailed, example_gradient, example_objective, l1_prox, predict, sgd_step,
    soft_threshold, train,
)
from semparse.logic import make_set
from semparse.model import Params

invariant = pytest.mark.invariant


def running_dataset(target):
    g, c = running()
    ds = Dataset([Example(tuple(tokenize(RUNNING)), c.id, make_set(target))], {c.id: c})
    return g, ds


def test_consistent_posterior():
    assert consistent_posterior([0.2, 0.4, 0.1, 0.3], [False, True, True, False]) == \
        [0.0, 0.8, 0.2, 0.0]
    assert consistent_posterior([0.5, 0.5], [False, False]) is None
    with pytest.raises(ValueError):
        consistent_posterior([1.0], [True, False])


def test_no_consistent_derivation_gives_no_gradient():
    d, _, params, _ = gradient_instance(3, False)
    assert example_gradient(d, [False] * len(d), params) is None
    assert example_objective(d, [False] * len(d), params) is None
    assert example_gradient([], [], params) is None


def test_objective_matches_oracle():
    for seed in range(5):
        d, ok, params, _ = gradient_instance(seed, seed % 2 == 1)
        alpha = params.nn.alpha if params.nn else ()
        w = params.nn.w if params.nn else ()
        want = float(mp_objective(d, ok, params.linear, alpha, w))
        assert example_objective(d, ok, params) == pytest.approx(want, abs=1e-12)


def test_optimiser_steps():
    theta = {"a": 1.0}
    sgd_step(theta, {"a": 0.5, "b": -1.0}, 0.1)
    assert theta == pytest.approx({"a": 1.05, "b": -0.1})
    st_ = OptimizerState()
    theta = {}
    adagrad_step(theta, {"a": 2.0}, st_, 0.1)
    assert theta["a"] == pytest.approx(0.1 * 2.0 / math.sqrt(4.0 + 1e-8))
    adagrad_step(theta, {"a": 2.0}, st_, 0.1)
    assert st_.sum_squared_grads["a"] == 8.0


def test_soft_threshold_and_prox():
    assert soft_threshold(0.5, 0.2) == pytest.approx(0.3)
    assert soft_threshold(-0.5, 0.2) == pytest.approx(-0.3)
    assert soft_threshold(0.1, 0.2) == 0.0
    theta = {"a": 0.05, "b": -1.0}
    l1_prox(theta, 1.0, 0.1)
    assert theta == pytest.approx({"b": -0.9})


def _eager(grads, cfg):
    theta, state = {}, OptimizerState()
    for g in grads:
        if cfg.optimizer == "adagrad":
            adagrad_step(theta, g, state, cfg.step_size)
            for k in list(theta):
                step = cfg.step_size / math.sqrt(state.sum_squared_grads.get(k, 0.0) + 1e-8)
                l1_prox(theta, cfg.l1, step, [k])
        else:
            sgd_step(theta, g, cfg.step_size)
            l1_prox(theta, cfg.l1, cfg.step_size)
    return theta


@invariant
@settings(max_examples=200, deadline=None)
@given(st.lists(st.dictionaries(st.sampled_from("abcd"), st.floats(-2, 2), max_size=3),
                min_size=1, max_size=12),
       st.sampled_from(["sgd", "adagrad"]), st.floats(0.0, 0.5))
def test_lazy_l1_matches_eager(grads, optimizer, lam):
    # with gradients fixed in advance, deferred shrinkage equals shrinking every step
    cfg = TrainConfig(step_size=0.1, optimizer=optimizer, l1=lam)
    block = _Block({}, cfg)
    for t, g in enumerate(grads, 1):
        block.update({k: v for k, v in g.items() if v != 0.0}, t)
    block.flush(len(grads))
    want = _eager([{k: v for k, v in g.items() if v != 0.0} for g in grads], cfg)
    for k in set(block.theta) | set(want):
        assert block.theta.get(k, 0.0) == pytest.approx(want.get(k, 0.0), abs=1e-9)


@invariant
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.booleans())
def test_gradient_matches_finite_differences(seed, with_nn):
    d, ok, params, _ = gradient_instance(seed, with_nn)
    analytic = flatten_gradient(example_gradient(d, ok, params))
    assert max_relative_error(analytic, fd_gradient(d, ok, params)) <= 1e-4


@invariant
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_small_step_increases_objective(seed):
    d, ok, params, _ = gradient_instance(seed, False)
    before = example_objective(d, ok, params)
    grad = example_gradient(d, ok, params)
    if not grad.linear:
        return  # already optimal up to rounding
    stepped = Params(dict(params.linear))
    sgd_step(stepped.linear, grad.linear, 1e-4)
    assert example_objective(d, ok, stepped) >= before


def test_running_example_learns_max_reading():
    g, ds = running_dataset([7])
    params, metrics = train(ds, g, TrainConfig(epochs=3))
    assert params.linear["rule:5"] > 0 > params.linear["rule:6"]
    assert metrics[-1]["trainAcc"] == 1.0
    pred = predict(ds.examples[0], ds.contexts, g, params)
    assert pred.correct and pred.lf_text == "max(and(prime, join(less, 10)))"


def test_unreachable_target_is_skipped():
    g, ds = running_dataset([11])
    params, metrics = train(ds, g, TrainConfig(epochs=2))
    assert [m["skipped"] for m in metrics] == [1, 1]
    assert params.linear == {}


def test_large_l1_zeroes_everything():
    train_ds, _ = make_arith_domain(3, 20, 5)
    from helpers import fixture
    g, _ = fixture("arith.gr", "running.tsv")
    params, metrics = train(train_ds, g, TrainConfig(epochs=2, l1=100.0))
    assert params.nonzero() == 0
    assert metrics[-1]["nonzeroWeights"] == 0


def test_metrics_and_determinism():
    train_ds, _ = make_arith_domain(2, 30, 5)
    from helpers import fixture
    g, _ = fixture("arith.gr", "running.tsv")
    cfg = TrainConfig(epochs=2, shuffle_seed=4)
    p1, m1 = train(train_ds, g, cfg)
    p2, m2 = train(train_ds, g, cfg)
    assert p1.linear == p2.linear
    assert set(m1[0]) == {"epoch", "objective", "trainAcc", "skipped", "nonzeroWeights", "seconds"}
    assert [r["objective"] for r in m1] == [r["objective"] for r in m2]


def test_nn_training_runs():
    g, ds = running_dataset([7])
    params, _ = train(ds, g, TrainConfig(epochs=3, nn_units=2, optimizer="adagrad"))
    assert params.nn is not None and params.nn.m == 2
    assert predict(ds.examples[0], ds.contexts, g, params).correct


def test_parallel_evaluation_matches_serial():
    train_ds, test_ds = make_arith_domain(5, 30, 12)
    from helpers import fixture
    g, _ = fixture("arith.gr", "running.tsv")
    params, _ = train(train_ds, g, TrainConfig(epochs=1))
    serial = evaluate_detailed(test_ds, g, params)
    parallel = evaluate_detailed(test_ds, g, params, jobs=2)
    assert [(p.correct, p.lf_text) for p in serial] == [(p.correct, p.lf_text) for p in parallel]
    assert evaluate(Dataset([], test_ds.contexts), g, params) == 0.0


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0}, {"step_size": 0.0}, {"optimizer": "adam"}, {"l1": -1.0}, {"nn_units": -1},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)
