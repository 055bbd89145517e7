"""Lambda DCS logical forms, their types, and the executor.

A logical form denotes a set.  Constants, unary predicates and the
compositional operators (join, intersection, count, max, min) are the
only constructs; relations may appear solely as the first argument of a
join.  Numbers are stored as floats, entities as strings.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

if TYPE_CHECKING:
    from semparse.kb import Context

TOLERANCE = 1e-9
BUILTINS = ("less", "more")

Value = Union[str, float]


class LogicError(Exception):
    """Base class for execution and type errors."""


class UnknownPredicate(LogicError):
    pass


class InfiniteDenotation(LogicError):
    pass


class TypeMismatch(LogicError):
    def __init__(self, message, path=()):
        self.path = tuple(path)
        where = "/".join(self.path) or "<root>"
        super().__init__(f"{message} (at {where})")


class EmptyAggregate(LogicError):
    pass


class LFSyntaxError(ValueError):
    def __init__(self, message, pos):
        self.pos = pos
        super().__init__(f"{message} at position {pos}")


# ---------------------------------------------------------------------------
# Logical forms


class LogicalForm:
    __slots__ = ()

    def __str__(self):
        return serialize_lf(self)


@dataclass(frozen=True, slots=True)
class Entity(LogicalForm):
    id: str


@dataclass(frozen=True, slots=True)
class Number(LogicalForm):
    value: float


@dataclass(frozen=True, slots=True)
class Unary(LogicalForm):
    pred: str


@dataclass(frozen=True, slots=True)
class Rel(LogicalForm):
    pred: str


@dataclass(frozen=True, slots=True)
class Join(LogicalForm):
    rel: LogicalForm
    arg: LogicalForm


@dataclass(frozen=True, slots=True)
class Intersect(LogicalForm):
    left: LogicalForm
    right: LogicalForm


@dataclass(frozen=True, slots=True)
class Count(LogicalForm):
    arg: LogicalForm


@dataclass(frozen=True, slots=True)
class Max(LogicalForm):
    arg: LogicalForm


@dataclass(frozen=True, slots=True)
class Min(LogicalForm):
    arg: LogicalForm


# ---------------------------------------------------------------------------
# Denotations


class Denotation:
    __slots__ = ()


@dataclass(frozen=True, slots=True)
class FiniteSet(Denotation):
    values: frozenset

    def __str__(self):
        return "{" + ", ".join(format_value(v) for v in sorted_values(self.values)) + "}"


@dataclass(frozen=True, slots=True)
class Interval(Denotation):
    lower: float = -math.inf
    upper: float = math.inf
    lower_open: bool = True
    upper_open: bool = True

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty or degenerate interval [{self.lower}, {self.upper}]")

    def contains(self, x) -> bool:
        if not is_number(x):
            return False
        if x < self.lower or (self.lower_open and x == self.lower):
            return False
        if x > self.upper or (self.upper_open and x == self.upper):
            return False
        return True

    def __str__(self):
        lo = "(" if self.lower_open else "["
        hi = ")" if self.upper_open else "]"
        return f"{lo}{format_value(self.lower)}, {format_value(self.upper)}{hi}"


def make_set(values) -> FiniteSet:
    return FiniteSet(frozenset(float(v) if is_number(v) else v for v in values))


def is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def format_value(v) -> str:
    if is_number(v):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if float(v).is_integer() and abs(v) < 1e15:
            return str(int(v))
        return repr(float(v))
    return str(v)


def sorted_values(values):
    # numbers first, then entities; deterministic regardless of set order
    return sorted(values, key=lambda v: (0, v, "") if is_number(v) else (1, 0.0, v))


def _interval_meet(a: Interval, b: Interval) -> Denotation:
    if a.lower > b.lower:
        lower, lower_open = a.lower, a.lower_open
    elif b.lower > a.lower:
        lower, lower_open = b.lower, b.lower_open
    else:
        lower, lower_open = a.lower, a.lower_open or b.lower_open
    if a.upper < b.upper:
        upper, upper_open = a.upper, a.upper_open
    elif b.upper < a.upper:
        upper, upper_open = b.upper, b.upper_open
    else:
        upper, upper_open = a.upper, a.upper_open or b.upper_open
    if lower < upper:
        return Interval(lower, upper, lower_open, upper_open)
    if lower == upper and not lower_open and not upper_open:
        return make_set([lower])
    return FiniteSet(frozenset())


def intersect_denotations(a: Denotation, b: Denotation) -> Denotation:
    if isinstance(a, FiniteSet) and isinstance(b, FiniteSet):
        return FiniteSet(a.values & b.values)
    if isinstance(a, FiniteSet):
        return FiniteSet(frozenset(v for v in a.values if b.contains(v)))
    if isinstance(b, FiniteSet):
        return FiniteSet(frozenset(v for v in b.values if a.contains(v)))
    return _interval_meet(a, b)


def denotation_equals(a: Denotation, b: Denotation) -> bool:
    """Set equality with an absolute tolerance of 1e-9 on numbers."""
    if isinstance(a, FiniteSet) != isinstance(b, FiniteSet):
        return False
    if isinstance(a, Interval):
        return (
            a.lower_open == b.lower_open
            and a.upper_open == b.upper_open
            and _close(a.lower, b.lower)
            and _close(a.upper, b.upper)
        )
    if len(a.values) != len(b.values):
        return False
    xs, ys = sorted_values(a.values), sorted_values(b.values)
    for x, y in zip(xs, ys):
        if is_number(x) != is_number(y):
            return False
        if is_number(x):
            if not _close(x, y):
                return False
        elif x != y:
            return False
    return True


def _close(x: float, y: float) -> bool:
    if math.isinf(x) or math.isinf(y):
        return x == y
    return abs(x - y) <= TOLERANCE


# ---------------------------------------------------------------------------
# Execution


def execute(z: LogicalForm, c: Context) -> Denotation:
    """Compute the denotation of ``z`` in context ``c``."""
    if isinstance(z, Entity):
        return FiniteSet(frozenset([z.id]))
    if isinstance(z, Number):
        return FiniteSet(frozenset([float(z.value)]))
    if isinstance(z, Unary):
        if z.pred in c.unaries:
            return FiniteSet(c.unaries[z.pred])
        if z.pred in c.binaries or z.pred in BUILTINS:
            raise TypeMismatch(f"relation {z.pred!r} used as a set")
        raise UnknownPredicate(z.pred)
    if isinstance(z, Rel):
        raise TypeMismatch(f"bare relation {z.pred!r} has no set denotation")
    if isinstance(z, Join):
        return _execute_join(z, c)
    if isinstance(z, Intersect):
        return intersect_denotations(execute(z.left, c), execute(z.right, c))
    if isinstance(z, Count):
        arg = execute(z.arg, c)
        if isinstance(arg, Interval):
            raise InfiniteDenotation("count of an interval")
        return make_set([len(arg.values)])
    if isinstance(z, (Max, Min)):
        arg = execute(z.arg, c)
        if isinstance(arg, Interval):
            raise InfiniteDenotation("extremum of an interval")
        if not arg.values:
            raise EmptyAggregate(type(z).__name__.lower())
        if not all(is_number(v) for v in arg.values):
            raise TypeMismatch("superlative over non-numeric values")
        pick = max if isinstance(z, Max) else min
        return make_set([pick(arg.values)])
    raise TypeError(f"not a logical form: {z!r}")


def _execute_join(z: Join, c: Context) -> Denotation:
    if not isinstance(z.rel, Rel):
        raise TypeMismatch("join expects a relation", ("join", "rel"))
    r = z.rel.pred
    arg = execute(z.arg, c)
    if r in BUILTINS:
        if isinstance(arg, Interval):
            if r == "less":
                return Interval(-math.inf, arg.upper, True, True)
            return Interval(arg.lower, math.inf, True, True)
        if not all(is_number(v) for v in arg.values):
            raise TypeMismatch(f"{r} applied to non-numeric values", ("join", "arg"))
        if not arg.values:
            return FiniteSet(frozenset())
        if r == "less":
            return Interval(-math.inf, max(arg.values), True, True)
        return Interval(min(arg.values), math.inf, True, True)
    if r not in c.binaries:
        if r in c.unaries:
            raise TypeMismatch(f"unary {r!r} used as a relation", ("join", "rel"))
        raise UnknownPredicate(r)
    if isinstance(arg, Interval):
        hits = (x for x, y in c.binaries[r] if arg.contains(y))
    else:
        hits = (x for x, y in c.binaries[r] if y in arg.values)
    return FiniteSet(frozenset(hits))


# ---------------------------------------------------------------------------
# Types


class SemType:
    __slots__ = ()


@dataclass(frozen=True, slots=True)
class TNumber(SemType):
    def __str__(self):
        return "number"


@dataclass(frozen=True, slots=True)
class TEntity(SemType):
    # None means "some entity class", compatible with every class
    cls: str | None = None

    def __str__(self):
        return "entity" if self.cls is None else f"entity:{self.cls}"


@dataclass(frozen=True, slots=True)
class TRelation(SemType):
    domain: SemType
    range: SemType

    def __post_init__(self):
        if isinstance(self.domain, TRelation) or isinstance(self.range, TRelation):
            raise ValueError("relation domain/range must be non-relation types")

    def __str__(self):
        return f"relation:{self.domain}:{self.range}"


def unify_types(a: SemType, b: SemType) -> SemType | None:
    """The more specific of two compatible set types, else None."""
    if isinstance(a, TNumber) and isinstance(b, TNumber):
        return a
    if isinstance(a, TEntity) and isinstance(b, TEntity):
        if a.cls is None:
            return b
        if b.cls is None or a.cls == b.cls:
            return a
    return None


def typecheck(z: LogicalForm, schema: Context, path=()) -> SemType:
    """Infer the (element) type of ``z``, raising TypeMismatch on ill-formed terms."""
    if isinstance(z, Number):
        return TNumber()
    if isinstance(z, Entity):
        return schema.entity_type(z.id)
    if isinstance(z, Unary):
        t = schema.type_of(z.pred)
        if isinstance(t, TRelation):
            raise TypeMismatch(f"relation {z.pred!r} used as a set", path)
        return t
    if isinstance(z, Rel):
        raise TypeMismatch(f"bare relation {z.pred!r}", path)
    if isinstance(z, Join):
        if not isinstance(z.rel, Rel):
            raise TypeMismatch("join expects a relation", path + ("rel",))
        rt = schema.type_of(z.rel.pred)
        if not isinstance(rt, TRelation):
            raise TypeMismatch(f"{z.rel.pred!r} is not a relation", path + ("rel",))
        at = typecheck(z.arg, schema, path + ("arg",))
        if unify_types(rt.range, at) is None:
            raise TypeMismatch(
                f"{z.rel.pred} expects {rt.range}, got {at}", path + ("arg",)
            )
        return rt.domain
    if isinstance(z, Intersect):
        lt = typecheck(z.left, schema, path + ("left",))
        rt = typecheck(z.right, schema, path + ("right",))
        t = unify_types(lt, rt)
        if t is None:
            raise TypeMismatch(f"cannot intersect {lt} with {rt}", path)
        return t
    if isinstance(z, Count):
        typecheck(z.arg, schema, path + ("arg",))
        return TNumber()
    if isinstance(z, (Max, Min)):
        t = typecheck(z.arg, schema, path + ("arg",))
        if not isinstance(t, TNumber):
            raise TypeMismatch(f"superlative over {t}", path + ("arg",))
        return TNumber()
    raise TypeError(f"not a logical form: {z!r}")


# ---------------------------------------------------------------------------
# Canonical text form


def serialize_lf(z) -> str:
    if isinstance(z, Entity):
        return f"entity({z.id})"
    if isinstance(z, Number):
        return format_value(z.value)
    if isinstance(z, (Unary, Rel)):
        return z.pred
    if isinstance(z, Join):
        return f"join({serialize_lf(z.rel)}, {serialize_lf(z.arg)})"
    if isinstance(z, Intersect):
        return f"and({serialize_lf(z.left)}, {serialize_lf(z.right)})"
    if isinstance(z, Count):
        return f"count({serialize_lf(z.arg)})"
    if isinstance(z, Max):
        return f"max({serialize_lf(z.arg)})"
    if isinstance(z, Min):
        return f"min({serialize_lf(z.arg)})"
    to_text = getattr(z, "to_text", None)
    if to_text is not None:
        return to_text()
    raise TypeError(f"cannot serialize {z!r}")


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<child>\$\d+)"
    r"|(?P<punct>[(),.]))"
)


class LFReader:
    """Recursive-descent reader for the canonical logical-form syntax.

    Subclassed by the grammar module to read semantic templates, which
    extend the syntax with lambdas, variables and child references.
    """

    OPERATORS = {"join", "and", "count", "max", "min", "entity"}

    def __init__(self, text: str):
        self.text = text
        self.tokens = []
        pos = 0
        text_end = len(text.rstrip())
        while pos < text_end:
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                raise LFSyntaxError(f"unexpected character {text[pos:pos + 1]!r}", pos)
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.i = 0

    def peek(self, offset=0):
        j = self.i + offset
        return self.tokens[j] if j < len(self.tokens) else (None, None, len(self.text))

    def next(self):
        tok = self.peek()
        if tok[0] is None:
            raise LFSyntaxError("unexpected end of input", tok[2])
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.next()
        if val != value:
            raise LFSyntaxError(f"expected {value!r}, got {val!r}", pos)

    def read_all(self):
        z = self.expr()
        kind, val, pos = self.peek()
        if kind is not None:
            raise LFSyntaxError(f"trailing input {val!r}", pos)
        return z

    def expr(self):
        kind, val, pos = self.next()
        if kind == "num":
            return Number(float(val))
        if kind == "ident":
            if val in self.OPERATORS and self.peek()[1] == "(":
                return self.operator(val, pos)
            return self.identifier(val, pos)
        raise LFSyntaxError(f"unexpected {val!r}", pos)

    def identifier(self, name, pos):
        return Unary(name)

    def relation(self):
        kind, val, pos = self.next()
        if kind != "ident":
            raise LFSyntaxError(f"expected relation name, got {val!r}", pos)
        return Rel(val)

    def operator(self, name, pos):
        self.expect("(")
        if name == "entity":
            kind, val, vpos = self.next()
            if kind != "ident":
                raise LFSyntaxError("expected entity id", vpos)
            node = Entity(val)
        elif name == "join":
            rel = self.relation()
            self.expect(",")
            node = Join(rel, self.expr())
        elif name == "and":
            left = self.expr()
            self.expect(",")
            node = Intersect(left, self.expr())
        else:
            node = {"count": Count, "max": Max, "min": Min}[name](self.expr())
        self.expect(")")
        return node


def parse_lf(s: str) -> LogicalForm:
    """Parse the canonical text form produced by :func:`serialize_lf`."""
    return LFReader(s).read_all()
