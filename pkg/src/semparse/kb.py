"""Contexts (knowledge bases), datasets, and the synthetic arithmetic domain."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from semparse.logic import (
    BUILTINS,
    Count,
    FiniteSet,
    Intersect,
    Join,
    LogicalForm,
    Max,
    Min,
    Number,
    Rel,
    SemType,
    TEntity,
    TNumber,
    TRelation,
    Unary,
    UnknownPredicate,
    execute,
    format_value,
    is_number,
    make_set,
    sorted_values,
)


class KBFormatError(ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        where = f"{path or '<kb>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


class DatasetError(ValueError):
    pass


BUILTIN_TYPE = TRelation(TNumber(), TNumber())


@dataclass
class Context:
    """Interpretation of predicates: unary tables, binary tables and a schema."""

    id: str
    unaries: dict = field(default_factory=dict)
    binaries: dict = field(default_factory=dict)
    schema: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in BUILTINS:
            if name in self.unaries or name in self.binaries or name in self.schema:
                raise KBFormatError(f"{name!r} is a reserved builtin predicate")
        self.unaries = {p: frozenset(vs) for p, vs in self.unaries.items()}
        self.binaries = {p: frozenset(ps) for p, ps in self.binaries.items()}
        for p, vs in self.unaries.items():
            self.schema.setdefault(p, _infer_type(vs))
        for p, pairs in self.binaries.items():
            if p not in self.schema:
                self.schema[p] = TRelation(
                    _infer_type(x for x, _ in pairs), _infer_type(y for _, y in pairs)
                )
        self._entity_types = None

    def type_of(self, pred: str) -> SemType:
        if pred in BUILTINS:
            return BUILTIN_TYPE
        try:
            return self.schema[pred]
        except KeyError:
            raise UnknownPredicate(pred) from None

    def entity_type(self, entity: str) -> SemType:
        if self._entity_types is None:
            classes = {}
            for p, vs in self.unaries.items():
                t = self.schema[p]
                if isinstance(t, TEntity) and t.cls is not None:
                    for v in vs:
                        classes.setdefault(v, set()).add(t.cls)
            for p, pairs in self.binaries.items():
                t = self.schema[p]
                for (x, y) in pairs:
                    for v, vt in ((x, t.domain), (y, t.range)):
                        if isinstance(vt, TEntity) and vt.cls is not None:
                            classes.setdefault(v, set()).add(vt.cls)
            self._entity_types = {
                e: TEntity(next(iter(cs))) if len(cs) == 1 else TEntity(None)
                for e, cs in classes.items()
            }
        return self._entity_types.get(entity, TEntity(None))

    def predicates(self):
        return set(self.unaries) | set(self.binaries) | set(BUILTINS)


def _infer_type(values) -> SemType:
    values = list(values)
    if values and all(is_number(v) for v in values):
        return TNumber()
    return TEntity(None)


def _conforms(value, t: SemType) -> bool:
    return is_number(value) if isinstance(t, TNumber) else not is_number(value)


# ---------------------------------------------------------------------------
# KB files

_NUMBER_RE = re.compile(r"^-?\d+(\.\d+)?([eE][+-]?\d+)?$")


def parse_value(tok: str):
    return float(tok) if _NUMBER_RE.match(tok) else tok


def parse_type_spec(spec: str) -> SemType:
    parts = spec.split(":")

    def atom(i):
        if i < len(parts) and parts[i] == "number":
            return TNumber(), i + 1
        if i < len(parts) and parts[i] == "entity":
            if i + 1 < len(parts) and parts[i + 1] not in ("number", "entity"):
                return TEntity(parts[i + 1]), i + 2
            return TEntity(None), i + 1
        raise ValueError(f"bad type spec {spec!r}")

    if parts[0] == "relation":
        dom, i = atom(1)
        rng, i = atom(i)
    else:
        dom, i = atom(0)
        rng = None
    if i != len(parts):
        raise ValueError(f"bad type spec {spec!r}")
    return dom if rng is None else TRelation(dom, rng)


def load_kb(path, context_id: str | None = None) -> Context:
    """Read a KB in the line-oriented TSV format (``unary``/``binary``/``type``)."""
    path = Path(path)
    unaries, binaries, schema = {}, {}, {}
    facts = []  # (line number, predicate, values) for deferred type checks
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            kind = fields[0]
            if kind == "unary" and len(fields) == 3:
                pred, vals = fields[1], (parse_value(fields[2]),)
                unaries.setdefault(pred, set()).add(vals[0])
            elif kind == "binary" and len(fields) == 4:
                pred, vals = fields[1], (parse_value(fields[2]), parse_value(fields[3]))
                binaries.setdefault(pred, set()).add(vals)
            elif kind == "type" and len(fields) == 3:
                pred = fields[1]
                if pred in BUILTINS:
                    raise KBFormatError(f"cannot redeclare builtin {pred!r}", lineno, path)
                try:
                    schema[pred] = parse_type_spec(fields[2])
                except ValueError as e:
                    raise KBFormatError(str(e), lineno, path) from None
                continue
            else:
                raise KBFormatError(f"malformed line {line!r}", lineno, path)
            if pred in BUILTINS:
                raise KBFormatError(f"cannot redefine builtin {pred!r}", lineno, path)
            facts.append((lineno, kind, pred, vals))

    for lineno, kind, pred, vals in facts:
        t = schema.get(pred)
        if t is None:
            continue
        if kind == "unary":
            if isinstance(t, TRelation):
                raise KBFormatError(f"{pred!r} declared as relation", lineno, path)
            ok = _conforms(vals[0], t)
        else:
            if not isinstance(t, TRelation):
                raise KBFormatError(f"{pred!r} declared as unary", lineno, path)
            ok = _conforms(vals[0], t.domain) and _conforms(vals[1], t.range)
        if not ok:
            raise KBFormatError(f"value violates declared type {t} of {pred!r}", lineno, path)
    for pred in unaries.keys() & binaries.keys():
        raise KBFormatError(f"{pred!r} used as both unary and binary", None, path)
    return Context(context_id or path.stem, unaries, binaries, schema)


def save_kb(c: Context, path) -> None:
    lines = []
    for pred in sorted(c.schema):
        lines.append(f"type\t{pred}\t{c.schema[pred]}")
    for pred in sorted(c.unaries):
        for v in sorted_values(c.unaries[pred]):
            lines.append(f"unary\t{pred}\t{format_value(v)}")
    for pred in sorted(c.binaries):
        pairs = sorted(c.binaries[pred], key=lambda p: (str(p[0]), str(p[1])))
        for x, y in pairs:
            lines.append(f"binary\t{pred}\t{format_value(x)}\t{format_value(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Datasets

_PUNCT = "?!.,;:"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and detach trailing punctuation."""
    tokens = []
    for word in text.lower().split():
        tail = []
        while len(word) > 1 and word[-1] in _PUNCT:
            tail.append(word[-1])
            word = word[:-1]
        tokens.append(word)
        tokens.extend(reversed(tail))
    return tokens


@dataclass(frozen=True)
class Example:
    utterance: tuple
    context_id: str
    target: FiniteSet

    def __post_init__(self):
        if not self.utterance:
            raise DatasetError("empty utterance")


@dataclass
class Dataset:
    examples: list
    contexts: dict

    def __post_init__(self):
        for ex in self.examples:
            if ex.context_id not in self.contexts:
                raise DatasetError(f"unknown context {ex.context_id!r}")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def _target_from_json(obj) -> FiniteSet:
    if not isinstance(obj, dict) or len(obj) != 1:
        raise DatasetError(f"malformed target {obj!r}")
    if "count" in obj:
        n = obj["count"]
        if not is_number(n):
            raise DatasetError(f"malformed count target {obj!r}")
        return make_set([n])
    if "set" in obj and isinstance(obj["set"], list):
        for v in obj["set"]:
            if not (is_number(v) or isinstance(v, str)):
                raise DatasetError(f"bad target value {v!r}")
        return make_set(obj["set"])
    raise DatasetError(f"malformed target {obj!r}")


def target_to_json(y: FiniteSet) -> dict:
    out = []
    for v in sorted_values(y.values):
        out.append(int(v) if is_number(v) and float(v).is_integer() else v)
    return {"set": out}


def load_dataset(path, contexts: dict) -> Dataset:
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                utt, ctx, target = rec["utterance"], rec["context"], rec["target"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed record ({e})") from None
            if ctx not in contexts:
                raise DatasetError(f"{path}:{lineno}: unknown context {ctx!r}")
            tokens = tokenize(utt)
            if not tokens:
                raise DatasetError(f"{path}:{lineno}: empty utterance")
            examples.append(Example(tuple(tokens), ctx, _target_from_json(target)))
    return Dataset(examples, dict(contexts))


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in ds.examples:
            rec = {
                "utterance": " ".join(ex.utterance),
                "context": ex.context_id,
                "target": target_to_json(ex.target),
            }
            f.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Synthetic arithmetic domain

ARITH_RANGE = range(1, 101)

# predicate -> (singular words, plural words)
ARITH_NOUNS = {
    "prime": ("prime", "primes"),
    "even": ("even number", "even numbers"),
    "odd": ("odd number", "odd numbers"),
    "square": ("square", "squares"),
}

# (template id, text, aggregate, comparator); {p}/{ps} are the noun forms
ARITH_TEMPLATES = [
    ("largest-less", "what is the largest {p} less than {n} ?", "max", "less"),
    ("largest-more", "what is the largest {p} more than {n} ?", "max", "more"),
    ("smallest-less", "what is the smallest {p} less than {n} ?", "min", "less"),
    ("smallest-more", "what is the smallest {p} more than {n} ?", "min", "more"),
    ("count-less", "how many {ps} are less than {n} ?", "count", "less"),
    ("count-more", "how many {ps} are more than {n} ?", "count", "more"),
    # paraphrases with no lexical rule for the swapped word
    ("biggest-less", "what is the biggest {p} less than {n} ?", "max", "less"),
    ("largest-smaller", "what is the largest {p} smaller than {n} ?", "max", "less"),
    ("smallest-smaller", "what is the smallest {p} smaller than {n} ?", "min", "less"),
    ("biggest-more", "what is the biggest {p} more than {n} ?", "max", "more"),
    ("count-smaller", "how many {ps} are smaller than {n} ?", "count", "less"),
]


def arith_context() -> Context:
    nums = [float(n) for n in ARITH_RANGE]
    roots = {float(k * k) for k in range(1, 11)}

    def is_prime(n):
        n = int(n)
        return n > 1 and all(n % d for d in range(2, int(n ** 0.5) + 1))

    unaries = {
        "prime": {n for n in nums if is_prime(n)},
        "even": {n for n in nums if int(n) % 2 == 0},
        "odd": {n for n in nums if int(n) % 2 == 1},
        "square": {n for n in nums if n in roots},
    }
    schema = {p: TNumber() for p in unaries}
    return Context("arith", unaries, {}, schema)


def arith_gold_lf(pred: str, aggregate: str, comparator: str, n: float) -> LogicalForm:
    body = Intersect(Unary(pred), Join(Rel(comparator), Number(float(n))))
    return {"max": Max, "min": Min, "count": Count}[aggregate](body)


def make_arith_domain(seed: int, n_train: int, n_test: int):
    """Generate (train, test) datasets over the arithmetic KB.

    Targets are computed by executing gold logical forms; the gold forms
    themselves are discarded.  Train and test never share a
    (template, N) combination.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("counts must be >= 1")
    ctx = arith_context()
    rng = random.Random(seed)

    keys = [(tid, n) for tid, *_ in ARITH_TEMPLATES for n in range(2, 100)]
    rng.shuffle(keys)
    # test keys drawn first so the larger train split keeps broader coverage
    n_test_keys = max(1, len(keys) * n_test // (n_train + n_test))
    split = {"test": keys[:n_test_keys], "train": keys[n_test_keys:]}
    templates = {t[0]: t for t in ARITH_TEMPLATES}

    def draw(key_pool, count):
        out, seen = [], set()
        pool = list(key_pool)
        attempts = 0
        while len(out) < count:
            attempts += 1
            if attempts > 200 * count + 10000:
                raise RuntimeError("could not generate enough arithmetic examples")
            tid, n = pool[rng.randrange(len(pool))]
            pred = rng.choice(sorted(ARITH_NOUNS))
            if (tid, n, pred) in seen:
                continue
            _, text, agg, comp = templates[tid]
            z = arith_gold_lf(pred, agg, comp, n)
            try:
                y = execute(z, ctx)
            except Exception:
                continue
            if not isinstance(y, FiniteSet):
                continue
            seen.add((tid, n, pred))
            sing, plural = ARITH_NOUNS[pred]
            utt = text.format(p=sing, ps=plural, n=n)
            out.append(Example(tuple(tokenize(utt)), ctx.id, y))
        return out

    contexts = {ctx.id: ctx}
    train = Dataset(draw(split["train"], n_train), contexts)
    test = Dataset(draw(split["test"], n_test), contexts)
    return train, test
