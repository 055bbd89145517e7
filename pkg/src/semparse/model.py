"""Features, derivation scoring and the softmax over candidate derivations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semparse.grammar import ROOT, is_complete
from semparse.logic import FiniteSet, LogicError, execute

MATCH_PREFIX = 4


class ParamsFormatError(ValueError):
    pass


@dataclass
class NNParams:
    """One hidden layer: score = sum_i alpha[i] * tanh(phi . w[i])."""

    alpha: list
    w: list

    def __post_init__(self):
        if len(self.alpha) < 1 or len(self.alpha) != len(self.w):
            raise ValueError("nn needs m >= 1 with len(alpha) == len(w) == m")

    @property
    def m(self) -> int:
        return len(self.alpha)


@dataclass
class Params:
    linear: dict = field(default_factory=dict)
    nn: NNParams | None = None

    def nonzero(self) -> int:
        n = sum(1 for v in self.linear.values() if v != 0.0)
        if self.nn is not None:
            n += sum(1 for a in self.nn.alpha if a != 0.0)
            n += sum(1 for w in self.nn.w for v in w.values() if v != 0.0)
        return n


# ---------------------------------------------------------------------------
# Features


def matches(word: str, pred: str) -> bool:
    """Word and predicate name are equal or share a prefix of >= 4 characters."""
    word = word.lower()
    pred = pred.lower()
    if word == pred:
        return True
    return len(word) >= MATCH_PREFIX and len(pred) >= MATCH_PREFIX \
        and word[:MATCH_PREFIX] == pred[:MATCH_PREFIX]


def local_features(tokens, d) -> dict:
    """Features of the single rule application at the top of ``d``."""
    f = {}
    if d.rule_id:
        f[f"rule:{d.rule_id}"] = 1.0
    symbols = d.rule.symbols if d.rule is not None else ()
    if symbols:
        words = tokens if d.span is None else tokens[d.span[0]:d.span[1]]
        n_match = 0
        for a in dict.fromkeys(words):
            for b in symbols:
                key = f"cooc:{a}~{b}"
                f[key] = f.get(key, 0.0) + 1.0
                if matches(a, b):
                    n_match += 1
        if n_match:
            f["match"] = float(n_match)
    return f


def denote(lf, context, cache=None):
    """Execute ``lf``; returns the denotation or the raised LogicError."""
    if cache is not None and lf in cache:
        return cache[lf]
    try:
        y = execute(lf, context)
    except LogicError as e:
        y = e
    if cache is not None:
        cache[lf] = y
    return y


def denotation_features(lf, context, cache=None) -> dict:
    y = denote(lf, context, cache)
    if isinstance(y, LogicError):
        return {"exec:error": 1.0}
    if isinstance(y, FiniteSet):
        n = len(y.values)
        bucket = "0" if n == 0 else "1" if n == 1 else "2-10" if n <= 10 else "11+"
        return {"exec:empty" if n == 0 else "exec:ok": 1.0, f"denotSize:{bucket}": 1.0}
    return {"exec:ok": 1.0}


def _add(into: dict, other: dict):
    for k, v in other.items():
        into[k] = into.get(k, 0.0) + v


def featurize(tokens, context, d) -> dict:
    """Full feature vector of a derivation, computed from scratch."""
    f = {}
    for node in d.walk():
        _add(f, local_features(tokens, node))
    if d.category == ROOT and is_complete(d.sem):
        _add(f, denotation_features(d.sem, context))
    return {k: v for k, v in f.items() if v != 0.0}


# ---------------------------------------------------------------------------
# Scoring


def score_linear(phi: dict, theta: dict) -> float:
    if len(theta) < len(phi):
        return sum(v * phi[k] for k, v in theta.items() if k in phi)
    return sum(v * theta[k] for k, v in phi.items() if k in theta)


def score_nn(phi: dict, nn: NNParams) -> float:
    return sum(a * math.tanh(score_linear(phi, w)) for a, w in zip(nn.alpha, nn.w))


def score(phi: dict, params: Params) -> float:
    s = score_linear(phi, params.linear)
    if params.nn is not None:
        s += score_nn(phi, params.nn)
    return s


def softmax_distribution(scores) -> list:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("softmax of an empty list")
    e = np.exp(s - s.max())
    return list(e / e.sum())


class Model:
    """Scores derivations under fixed parameters.

    :meth:`scorer` returns a callback for the parser that fills
    ``d.features`` incrementally from the children's features, which
    equals :func:`featurize` on the finished tree.
    """

    def __init__(self, params: Params | None = None):
        self.params = params if params is not None else Params()

    def score(self, phi: dict) -> float:
        return score(phi, self.params)

    def scorer(self, tokens, context, cache=None):
        tokens = list(tokens)
        cache = {} if cache is None else cache
        params = self.params

        def _score(d):
            struct = local_features(tokens, d)
            for c in d.children:
                _add(struct, c.structural)
            d.structural = struct
            if d.category == ROOT and is_complete(d.sem):
                full = dict(struct)
                _add(full, denotation_features(d.sem, context, cache))
            else:
                full = struct
            d.features = full
            return score(full, params)

        return _score


# ---------------------------------------------------------------------------
# Weights files


def save_params(p: Params, path) -> None:
    lines = [f"{k}\t{float(v)!r}" for k, v in sorted(p.linear.items())]
    if p.nn is not None:
        lines.append(f"#nn m={p.nn.m}")
        for i, a in enumerate(p.nn.alpha):
            lines.append(f"alpha\t{i}\t{float(a)!r}")
        for i, w in enumerate(p.nn.w):
            for k, v in sorted(w.items()):
                lines.append(f"w\t{i}\t{k}\t{float(v)!r}")
    text = "\n".join(lines) + ("\n" if lines else "")
    Path(path).write_text(text, encoding="utf-8")


def load_params(path) -> Params:
    linear = {}
    m = None
    alpha, w = {}, None
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#nn"):
                if m is not None:
                    raise ParamsFormatError(f"line {lineno}: repeated #nn header")
                try:
                    m = int(line.split("m=", 1)[1])
                except (IndexError, ValueError):
                    raise ParamsFormatError(f"line {lineno}: bad header {line!r}") from None
                if m < 1:
                    raise ParamsFormatError(f"line {lineno}: m must be >= 1")
                w = [{} for _ in range(m)]
                continue
            if line.startswith("#"):
                continue
            fields = line.split("\t")
            try:
                if m is None:
                    if len(fields) != 2:
                        raise ValueError("expected key<TAB>weight")
                    k, v = fields[0], float(fields[1])
                    if k in linear:
                        raise ValueError(f"duplicate key {k!r}")
                    linear[k] = v
                elif fields[0] == "alpha" and len(fields) == 3:
                    i, v = int(fields[1]), float(fields[2])
                    if not 0 <= i < m or i in alpha:
                        raise ValueError(f"bad or duplicate alpha index {i}")
                    alpha[i] = v
                elif fields[0] == "w" and len(fields) == 4:
                    i, k, v = int(fields[1]), fields[2], float(fields[3])
                    if not 0 <= i < m or k in w[i]:
                        raise ValueError(f"bad or duplicate w entry {i} {k!r}")
                    w[i][k] = v
                else:
                    raise ValueError("unrecognised line")
            except ValueError as e:
                raise ParamsFormatError(f"{path}:{lineno}: {e}") from None
            if not math.isfinite(v):
                raise ParamsFormatError(f"{path}:{lineno}: non-finite weight")
    nn = None
    if m is not None:
        if sorted(alpha) != list(range(m)):
            raise ParamsFormatError(f"{path}: expected {m} alpha entries")
        nn = NNParams([alpha[i] for i in range(m)], w)
    return Params(linear, nn)
