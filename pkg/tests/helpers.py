"""Shared fixtures: bundled grammar instances and random (grammar, KB, utterance) draws."""

from __future__ import annotations

import random

from semparse import data_path
from semparse.grammar import load_grammar, parse_grammar
from semparse.kb import Context, load_kb, tokenize
from semparse.logic import FiniteSet, LogicError, TNumber, execute

RUNNING = "what is the largest prime less than 10 ?"

# (grammar file, KB file, utterance); every grammar has <= 15 rules
FIXTURE_INSTANCES = [
    ("running.gr", "running.tsv", RUNNING),
    ("running.gr", "running.tsv", "what is the prime less than 10 ?"),
    ("running.gr", "running.tsv", "what is the largest 10 ?"),
    ("crude.gr", "running.tsv", "prime less than 10"),
    ("crude.gr", "running.tsv", "less than prime"),
    ("crude.gr", "running.tsv", "prime prime less than 7"),
    ("floating.gr", "running.tsv", "prime"),
    ("floating.gr", "running.tsv", "primes 10"),
    ("floating.gr", "running.tsv", "the prime 5"),
    ("floating.gr", "running.tsv", "prime under 4 3"),
    ("ccg.gr", "running.tsv", "prime less than 10"),
    ("ccg.gr", "running.tsv", "prime more than 3 less than 10"),
    ("ccg.gr", "running.tsv", "prime more than 2"),
]


def fixture(grammar_name, kb_name):
    return load_grammar(data_path(grammar_name)), load_kb(data_path(kb_name))


def running():
    return fixture("running.gr", "running.tsv")


NOUNS = ("cat", "dog", "fish")
PREDS = ("p0", "p1", "p2")


def random_context(rng: random.Random) -> Context:
    unaries = {
        p: {float(x) for x in rng.sample(range(1, 21), rng.randint(3, 10))} for p in PREDS
    }
    return Context("rand", unaries, {}, {p: TNumber() for p in PREDS})


def random_grammar_text(rng: random.Random) -> str:
    lines = []
    for w in NOUNS:
        for p in rng.sample(PREDS, rng.randint(1, 2)):
            lines.append(f'rule N := "{w}" => const({p})')
    lines += ['rule Rel := "below" => rel(less)', 'rule Rel := "above" => rel(more)']
    if rng.random() < 0.5:
        lines.append('rule Rel := "below" => rel(more)')
    if rng.random() < 0.5:
        lines.append("float Rel => rel(less)")
    lines += ["rule CP := Rel NP => join($1, $2)", "rule N := N CP => and($1, $2)"]
    lines.append('rule N := "top" N => max($1)')
    if rng.random() < 0.7:
        lines.append('rule N := "top" N => min($1)')
    if rng.random() < 0.5:
        lines.append('rule N := "many" N => count($1)')
    if rng.random() < 0.5:
        lines.append("rule N := _ N => $1")
    lines.append("rule ROOT := N => $1")
    return "\n".join(lines) + "\n"


def random_utterance(rng: random.Random) -> list:
    words = []
    if rng.random() < 0.6:
        words.append(rng.choice(["top", "many", "the"]))
    words.append(rng.choice(NOUNS))
    for p in (0.8, 0.3):
        if rng.random() < p:
            words += [rng.choice(["below", "above", "near"]), str(rng.randint(1, 20))]
    if rng.random() < 0.3:
        words.append(rng.choice(NOUNS))
    return tokenize(" ".join(words))


def random_instance(rng: random.Random, parse_fn, max_tries=200):
    """Draw until the utterance has at least two ROOT derivations.

    ``parse_fn(tokens, context, grammar)`` returns derivations.  The target
    is the denotation of one randomly chosen derivation, so some but not
    necessarily all candidates are consistent.
    """
    for _ in range(max_tries):
        ctx = random_context(rng)
        g = parse_grammar(random_grammar_text(rng))
        tokens = random_utterance(rng)
        derivs = parse_fn(tokens, ctx, g)
        good = []
        for d in derivs:
            try:
                y = execute(d.sem, ctx)
            except LogicError:
                continue
            if isinstance(y, FiniteSet):
                good.append(y)
        if len(derivs) >= 2 and good:
            return g, ctx, tokens, derivs, rng.choice(good)
    raise RuntimeError("no usable random instance")


# ---------------------------------------------------------------------------
# High-precision oracle for the learning objective


def mp_objective(derivations, consistent, linear, alpha=(), w=()):
    """log sum_{consistent} exp(s) - log sum_all exp(s), evaluated in mpmath."""
    import mpmath as mp

    scores = []
    for d in derivations:
        phi = d.features
        s = mp.fsum(mp.mpf(linear.get(k, 0)) * v for k, v in phi.items())
        for a, wi in zip(alpha, w):
            s += mp.mpf(a) * mp.tanh(mp.fsum(mp.mpf(wi.get(k, 0)) * v for k, v in phi.items()))
        scores.append(s)
    good = [s for s, ok in zip(scores, consistent) if ok]
    return mp.log(mp.fsum(mp.exp(s) for s in good)) - mp.log(mp.fsum(mp.exp(s) for s in scores))


def fd_gradient(derivations, consistent, params, h="1e-15", dps=50):
    """Central finite differences of :func:`mp_objective` for every coordinate.

    Returns ``{("linear", k): g, ("alpha", i): g, ("w", i, k): g}``.
    """
    import mpmath as mp

    keys = sorted({k for d in derivations for k in d.features})
    lin = dict(params.linear)
    alpha = list(params.nn.alpha) if params.nn else []
    w = [dict(x) for x in params.nn.w] if params.nn else []
    out = {}
    with mp.workdps(dps):
        h = mp.mpf(h)

        def f():
            return mp_objective(derivations, consistent, lin, alpha, w)

        def central(get, put):
            x0 = mp.mpf(get())
            put(x0 + h)
            hi = f()
            put(x0 - h)
            lo = f()
            put(x0)
            return float((hi - lo) / (2 * h))

        for k in keys:
            out[("linear", k)] = central(lambda: lin.get(k, 0), lambda v: lin.__setitem__(k, v))
        for i in range(len(alpha)):
            out[("alpha", i)] = central(lambda: alpha[i], lambda v: alpha.__setitem__(i, v))
            for k in keys:
                out[("w", i, k)] = central(lambda: w[i].get(k, 0), lambda v: w[i].__setitem__(k, v))
    return out


def flatten_gradient(grad):
    out = {("linear", k): v for k, v in grad.linear.items()}
    if grad.nn is not None:
        for i, a in enumerate(grad.nn.alpha):
            out[("alpha", i)] = a
            for k, v in grad.nn.w[i].items():
                out[("w", i, k)] = v
    return out


def max_relative_error(analytic: dict, numeric: dict, floor=1e-10) -> float:
    worst = 0.0
    for key in set(analytic) | set(numeric):
        a, b = analytic.get(key, 0.0), numeric.get(key, 0.0)
        worst = max(worst, abs(a - b) / max(abs(a), abs(b), floor))
    return worst


def gradient_instance(seed, with_nn):
    """A random (grammar, KB, theta) instance with scored candidates and consistency."""
    from semparse.learner import consistency
    from semparse.model import Model, NNParams, Params
    from semparse.parser import BeamConfig, parse

    rng = random.Random(seed)
    g, ctx, tokens, _, target = random_instance(rng, lambda t, c, gr: parse(t, c, gr))
    feats = parse(tokens, ctx, g, Model().scorer(tokens, ctx))
    keys = sorted({k for d in feats for k in d.features})
    params = Params({k: rng.gauss(0.0, 1.0) for k in keys})
    if with_nn:
        m = rng.randint(1, 3)
        params.nn = NNParams(
            [rng.gauss(0.0, 1.0) for _ in range(m)],
            [{k: rng.gauss(0.0, 0.5) for k in keys if rng.random() < 0.7} for _ in range(m)],
        )
    derivs = parse(tokens, ctx, g, Model(params).scorer(tokens, ctx), BeamConfig(200, 2))
    return derivs, consistency(derivs, target, ctx), params, tokens
