import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import RUNNING, random_instance
from semparse.kb import tokenize
from semparse.model import (
    Model, NNParams, Params, ParamsFormatError, denotation_features, featurize,
    load_params, local_features, matches, save_params, score, score_linear, score_nn,
    softmax_distribution,
)
from semparse.parser import BeamConfig, parse

invariant = pytest.mark.invariant


def running_distribution(g, c, theta):
    tokens = tokenize(RUNNING)
    derivs = parse(tokens, c, g, Model(Params(theta)).scorer(tokens, c))
    p = softmax_distribution([d.score for d in derivs])
    return {d.lf_text: pk for d, pk in zip(derivs, p)}, derivs


def test_running_example_probabilities(running_fixture):
    g, c = running_fixture
    p, _ = running_distribution(g, c, {"rule:5": 1.0, "rule:6": -1.0})
    assert p["max(and(prime, join(less, 10)))"] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
    assert p["min(and(prime, join(less, 10)))"] == pytest.approx(1 / (1 + math.exp(2)), abs=1e-12)


def test_running_rule_counts(running_fixture):
    g, c = running_fixture
    _, derivs = running_distribution(g, c, {})
    d1 = next(d for d in derivs if d.lf_text.startswith("max"))
    counts = [d1.features.get(f"rule:{i}", 0.0) for i in range(1, 8)]
    assert counts == [1, 1, 1, 1, 1, 0, 1]
    assert d1.features["exec:ok"] == 1.0
    assert d1.features["denotSize:1"] == 1.0
    assert d1.features["cooc:largest~max"] == 1.0
    assert d1.features["cooc:prime~prime"] == 1.0


def test_matches():
    assert matches("prime", "prime")
    assert matches("primes", "prime")
    assert matches("Capital", "capital_of")
    assert not matches("pri", "prime")
    assert not matches("largest", "max")


def test_local_features_counts_matches(running_fixture):
    g, c = running_fixture
    tokens = tokenize(RUNNING)
    d = parse(tokens, c, g)[0]
    n = next(x for x in d.walk() if x.rule_id == 1)
    assert local_features(tokens, n) == {"rule:1": 1.0, "cooc:prime~prime": 1.0, "match": 1.0}


def test_denotation_features(running_fixture):
    from semparse.logic import parse_lf
    _, c = running_fixture
    assert denotation_features(parse_lf("max(and(prime, join(less, 2)))"), c) == {"exec:error": 1.0}
    assert denotation_features(parse_lf("and(prime, join(less, 2))"), c) == \
        {"exec:empty": 1.0, "denotSize:0": 1.0}
    assert denotation_features(parse_lf("prime"), c) == {"exec:ok": 1.0, "denotSize:2-10": 1.0}
    assert denotation_features(parse_lf("join(less, 3)"), c) == {"exec:ok": 1.0}


def test_nn_score():
    nn = NNParams([2.0, -1.0], [{"a": 0.5}, {"b": 1.0}])
    phi = {"a": 2.0, "b": 1.0}
    assert score_nn(phi, nn) == pytest.approx(2 * math.tanh(1.0) - math.tanh(1.0))
    assert score(phi, Params({"a": 1.0}, nn)) == pytest.approx(2.0 + math.tanh(1.0))
    with pytest.raises(ValueError):
        NNParams([], [])


def test_softmax_empty():
    with pytest.raises(ValueError):
        softmax_distribution([])


def test_softmax_extreme_scores():
    p = softmax_distribution([1000.0, 0.0, -1000.0])
    assert p[0] == pytest.approx(1.0) and all(np.isfinite(p))


def test_params_round_trip(tmp_path):
    p = Params({"rule:1": 0.1, "cooc:a~b": -2.5e-7},
               NNParams([0.3, -0.2], [{"rule:1": 1.0}, {}]))
    save_params(p, tmp_path / "m.tsv")
    q = load_params(tmp_path / "m.tsv")
    assert q.linear == p.linear
    assert q.nn.alpha == p.nn.alpha and q.nn.w == p.nn.w


@pytest.mark.parametrize("text", [
    "rule:1\tx\n",
    "rule:1\t1\nrule:1\t2\n",
    "rule:1\n",
    "rule:1\tnan\n",
    "#nn m=2\nalpha\t0\t1\n",
    "#nn m=1\nalpha\t0\t1\nalpha\t0\t2\n",
    "#nn m=0\n",
    "#nn m=1\nalpha\t0\t1\nw\t3\tk\t1\n",
])
def test_corrupt_params(tmp_path, text):
    (tmp_path / "m.tsv").write_text(text)
    with pytest.raises(ParamsFormatError):
        load_params(tmp_path / "m.tsv")


# ---------------------------------------------------------------------------
# Properties

finite = st.floats(-50, 50, allow_nan=False)
sparse = st.dictionaries(st.sampled_from(list("abcdef")), finite, max_size=6)


@invariant
@settings(max_examples=300, deadline=None)
@given(st.lists(finite, min_size=1, max_size=12), finite)
def test_softmax_shift_invariance_and_normalisation(scores, shift):
    p = softmax_distribution(scores)
    q = softmax_distribution([s + shift for s in scores])
    assert sum(p) == pytest.approx(1.0, abs=1e-12)
    assert all(0.0 <= x <= 1.0 for x in p)
    assert np.allclose(p, q, atol=1e-12, rtol=1e-9)


@invariant
@settings(max_examples=300, deadline=None)
@given(sparse, sparse, sparse, finite, finite)
def test_score_linear_is_linear(phi1, phi2, theta, a, b):
    combo = {k: a * phi1.get(k, 0.0) + b * phi2.get(k, 0.0) for k in set(phi1) | set(phi2)}
    want = a * score_linear(phi1, theta) + b * score_linear(phi2, theta)
    assert score_linear(combo, theta) == pytest.approx(want, abs=1e-6)


@invariant
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_feature_decomposition(seed):
    # the vector built incrementally during search is the sum of per-node local
    # features plus root-level denotation features
    rng = random.Random(seed)
    g, c, tokens, _, _ = random_instance(rng, lambda t, c, g: parse(t, c, g))
    theta = {f"rule:{i}": rng.gauss(0, 1) for i in range(1, len(g.rules) + 1)}
    for d in parse(tokens, c, g, Model(Params(theta)).scorer(tokens, c), BeamConfig(20, 2)):
        total = {}
        for node in d.walk():
            for k, v in local_features(tokens, node).items():
                total[k] = total.get(k, 0.0) + v
        for k, v in denotation_features(d.sem, c).items():
            total[k] = total.get(k, 0.0) + v
        assert d.features == total
        assert featurize(tokens, c, d) == total
        assert all(v != 0.0 for v in d.features.values())
