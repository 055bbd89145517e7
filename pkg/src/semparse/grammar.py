"""Grammar rules, syntactic categories and semantic templates.

Rules are written in a small line-oriented DSL::

    rule NP := "less" "than" NP => join(less, $1)
    rule (N\\N)/NP := "less" "than" => lam y. lam f. and(f, join(less, y))
    float Rel => rel(more)
    option application on

A template is a logical form that may additionally contain child
references ``$k``, variables, and a prefix of ``lam v.`` binders.  A
template whose instantiation still has binders yields a *partial* value
(a :class:`Lam`) that CCG application can later fill.
"""

from __future__ import annotations

import itertools
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path

from semparse.logic import (
    Count,
    Entity,
    Intersect,
    Join,
    LFReader,
    LFSyntaxError,
    LogicalForm,
    Max,
    Min,
    Number,
    Rel,
    Unary,
    serialize_lf,
)


class GrammarError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TemplateError(ValueError):
    pass


class CategoryMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Categories


class Category:
    __slots__ = ()


@dataclass(frozen=True, slots=True)
class Atom(Category):
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True, slots=True)
class Forward(Category):
    """``result/arg``: looks for ``arg`` to its right."""

    result: Category
    arg: Category

    def __str__(self):
        return f"{_wrap(self.result)}/{_wrap(self.arg)}"


@dataclass(frozen=True, slots=True)
class Backward(Category):
    """``result\\arg``: looks for ``arg`` to its left."""

    result: Category
    arg: Category

    def __str__(self):
        return f"{_wrap(self.result)}\\{_wrap(self.arg)}"


def _wrap(c: Category) -> str:
    return str(c) if isinstance(c, Atom) else f"({c})"


ROOT = Atom("ROOT")

_CAT_TOKEN = re.compile(r"\s*([A-Za-z][A-Za-z0-9_]*|[()/\\])")


def parse_category(text: str) -> Category:
    toks = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _CAT_TOKEN.match(text, pos)
        if m is None:
            raise ValueError(f"bad category {text!r}")
        toks.append(m.group(1))
        pos = m.end()
    it = iter(toks + [None])
    cur = [next(it)]

    def advance():
        tok = cur[0]
        cur[0] = next(it, None)
        return tok

    def primary():
        tok = advance()
        if tok == "(":
            c = expr()
            if advance() != ")":
                raise ValueError(f"unbalanced parentheses in {text!r}")
            return c
        if tok is None or tok in ")/\\":
            raise ValueError(f"bad category {text!r}")
        return Atom(tok)

    def expr():
        c = primary()
        while cur[0] in ("/", "\\"):
            slash = advance()
            arg = primary()
            c = Forward(c, arg) if slash == "/" else Backward(c, arg)
        return c

    c = expr()
    if cur[0] is not None:
        raise ValueError(f"trailing input in category {text!r}")
    return c


# ---------------------------------------------------------------------------
# Template terms


@dataclass(frozen=True, slots=True)
class Var(LogicalForm):
    name: str

    def to_text(self):
        return self.name


@dataclass(frozen=True, slots=True)
class Child(LogicalForm):
    index: int  # 1-based

    def to_text(self):
        return f"${self.index}"


@dataclass(frozen=True, slots=True)
class Lam(LogicalForm):
    """A lambda binder.  As a semantic value this is a partial value."""

    var: str
    body: LogicalForm

    def to_text(self):
        return f"lam {self.var}. {serialize_lf(self.body)}"

    @property
    def arity(self) -> int:
        n, t = 0, self
        while isinstance(t, Lam):
            n, t = n + 1, t.body
        return n


def is_complete(sem) -> bool:
    return isinstance(sem, LogicalForm) and not isinstance(sem, Lam)


def _children(t):
    if isinstance(t, Join):
        return (t.rel, t.arg)
    if isinstance(t, Intersect):
        return (t.left, t.right)
    if isinstance(t, (Count, Max, Min)):
        return (t.arg,)
    if isinstance(t, Lam):
        return (t.body,)
    return ()


def _rebuild(t, kids):
    if isinstance(t, Join):
        return Join(*kids)
    if isinstance(t, Intersect):
        return Intersect(*kids)
    if isinstance(t, (Count, Max, Min)):
        return type(t)(kids[0])
    if isinstance(t, Lam):
        return Lam(t.var, kids[0])
    return t


def free_vars(t) -> set:
    if isinstance(t, Var):
        return {t.name}
    if isinstance(t, Lam):
        return free_vars(t.body) - {t.var}
    out = set()
    for k in _children(t):
        out |= free_vars(k)
    return out


def _all_vars(t) -> set:
    if isinstance(t, Var):
        return {t.name}
    out = {t.var} if isinstance(t, Lam) else set()
    for k in _children(t):
        out |= _all_vars(k)
    return out


def substitute(t, name: str, value):
    """Capture-avoiding substitution of ``value`` for free ``name`` in ``t``."""
    if isinstance(t, Var):
        return value if t.name == name else t
    if isinstance(t, Lam):
        if t.var == name:
            return t  # shadowed
        fv = free_vars(value)
        if t.var in fv and name in free_vars(t.body):
            taken = fv | _all_vars(t.body) | {name}
            fresh = next(
                f"{t.var}{i}" for i in itertools.count(1) if f"{t.var}{i}" not in taken
            )
            t = Lam(fresh, substitute(t.body, t.var, Var(fresh)))
        return Lam(t.var, substitute(t.body, name, value))
    kids = _children(t)
    if not kids:
        return t
    return _rebuild(t, [substitute(k, name, value) for k in kids])


def beta(fn: Lam, arg):
    return substitute(fn.body, fn.var, arg)


def _contains_template_nodes(t) -> bool:
    if isinstance(t, (Var, Child, Lam)):
        return True
    return any(_contains_template_nodes(k) for k in _children(t))


# ---------------------------------------------------------------------------
# Template parsing and instantiation


class TemplateReader(LFReader):
    OPERATORS = LFReader.OPERATORS | {"const", "rel", "number"}

    def __init__(self, text):
        super().__init__(text)
        self.bound = []
        self.max_child = 0

    def expr(self):
        kind, val, pos = self.peek()
        if kind == "ident" and val == "lam" and self.peek(1)[0] == "ident":
            self.next()
            _, var, _ = self.next()
            self.expect(".")
            self.bound.append(var)
            try:
                body = self.expr()
            finally:
                self.bound.pop()
            return Lam(var, body)
        if kind == "child":
            self.next()
            return self._child(val, pos)
        return super().expr()

    def _child(self, val, pos):
        k = int(val[1:])
        if k < 1:
            raise LFSyntaxError("child references start at $1", pos)
        self.max_child = max(self.max_child, k)
        return Child(k)

    def identifier(self, name, pos):
        if name in self.bound:
            return Var(name)
        raise LFSyntaxError(f"unbound variable {name!r}", pos)

    def relation(self):
        kind, val, pos = self.peek()
        if kind == "child":
            self.next()
            return self._child(val, pos)
        if kind == "ident" and val == "rel" and self.peek(1)[1] == "(":
            self.next()
            return self.operator("rel", pos)
        return super().relation()

    def operator(self, name, pos):
        if name in ("const", "rel", "number"):
            self.expect("(")
            kind, val, vpos = self.next()
            if name == "number":
                if kind != "num":
                    raise LFSyntaxError("expected a number", vpos)
                node = Number(float(val))
            else:
                if kind != "ident":
                    raise LFSyntaxError("expected a predicate name", vpos)
                node = Unary(val) if name == "const" else Rel(val)
            self.expect(")")
            return node
        return super().operator(name, pos)


def parse_template(text: str):
    """Parse a template; returns ``(term, max child index)``."""
    reader = TemplateReader(text)
    t = reader.read_all()
    body = t
    while isinstance(body, Lam):
        body = body.body
    if _has_inner_lam(body):
        raise TemplateError("lambda binders are only allowed as an outer prefix")
    return t, reader.max_child


def _has_inner_lam(t) -> bool:
    if isinstance(t, Lam):
        return True
    return any(_has_inner_lam(k) for k in _children(t))


def instantiate_template(t, children):
    """Fill ``$k`` references with the children's semantic values."""
    if isinstance(t, Child):
        if t.index > len(children):
            raise TemplateError(f"${t.index} but only {len(children)} children")
        return children[t.index - 1]
    return _fill(t, children, rel_position=False)


def _fill(t, children, rel_position):
    if isinstance(t, Child):
        if t.index > len(children):
            raise TemplateError(f"${t.index} but only {len(children)} children")
        v = children[t.index - 1]
        if not is_complete(v):
            raise TemplateError(f"partial value substituted for ${t.index}")
        if rel_position != isinstance(v, Rel):
            want = "a relation" if rel_position else "a set"
            raise TemplateError(f"${t.index} is {serialize_lf(v)}, expected {want}")
        return v
    if isinstance(t, Join):
        return Join(_fill(t.rel, children, True), _fill(t.arg, children, False))
    kids = _children(t)
    if not kids:
        return t
    return _rebuild(t, [_fill(k, children, False) for k in kids])


def introduced_symbols(t) -> tuple:
    """Predicate and aggregate names written literally in a template."""
    out = []

    def walk(x):
        if isinstance(x, (Unary, Rel)):
            out.append(x.pred)
        elif isinstance(x, Entity):
            out.append(x.id)
        elif isinstance(x, Count):
            out.append("count")
        elif isinstance(x, Max):
            out.append("max")
        elif isinstance(x, Min):
            out.append("min")
        for k in _children(x):
            walk(k)

    if t is not None and not isinstance(t, Application):
        walk(t)
    return tuple(dict.fromkeys(out))


# ---------------------------------------------------------------------------
# CCG application


def apply_application(fn, arg, fn_cat: Category, arg_cat: Category, direction: str):
    """Forward (``A/B B => A``) or backward (``B A\\B => A``) application."""
    if direction == "forward":
        ok = isinstance(fn_cat, Forward) and fn_cat.arg == arg_cat
    elif direction == "backward":
        ok = isinstance(fn_cat, Backward) and fn_cat.arg == arg_cat
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if not ok:
        raise CategoryMismatch(f"cannot apply {fn_cat} to {arg_cat} ({direction})")
    if not isinstance(fn, Lam):
        raise TemplateError("function has no binder to fill")
    if not is_complete(arg):
        raise TemplateError("argument of application must be complete")
    return fn_cat.result, beta(fn, arg)


@dataclass(frozen=True)
class Application:
    """Marker template for the built-in application combinators."""

    direction: str

    def to_text(self):
        return ">" if self.direction == "forward" else "<"


# ---------------------------------------------------------------------------
# Rules and grammars


@dataclass(frozen=True, slots=True)
class Terminal:
    token: str

    def __str__(self):
        return f'"{self.token}"'


@dataclass(frozen=True, slots=True)
class Wildcard:
    """Matches any single token."""

    def __str__(self):
        return "_"


@dataclass(frozen=True, slots=True)
class NonTerminal:
    category: Category

    def __str__(self):
        return _wrap(self.category) if not isinstance(self.category, Atom) else str(self.category)


@dataclass(frozen=True)
class Rule:
    id: int
    lhs: Category
    rhs: tuple
    template: object
    floating: bool = False
    symbols: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.floating and self.rhs:
            raise GrammarError("floating rules have an empty right-hand side")
        if not self.floating and not self.rhs:
            raise GrammarError("anchored rules need at least one right-hand-side item")
        if len(self.nonterminals) > 2:
            raise GrammarError("at most 2 nonterminals per rule")
        if not self.symbols:
            object.__setattr__(self, "symbols", introduced_symbols(self.template))

    @property
    def nonterminals(self) -> tuple:
        return tuple(it.category for it in self.rhs if isinstance(it, NonTerminal))

    @property
    def lexical(self) -> bool:
        return any(not isinstance(it, NonTerminal) for it in self.rhs)

    def build(self, sems):
        """Semantic value of this rule applied to its children's values."""
        if isinstance(self.template, Application):
            if self.template.direction == "forward":
                fn, arg = sems
                fn_cat, arg_cat = self.rhs[0].category, self.rhs[1].category
            else:
                arg, fn = sems
                arg_cat, fn_cat = self.rhs[0].category, self.rhs[1].category
            return apply_application(fn, arg, fn_cat, arg_cat, self.template.direction)[1]
        return instantiate_template(self.template, sems)

    def __str__(self):
        tmpl = serialize_lf(self.template) if not isinstance(self.template, Application) \
            else self.template.to_text()
        if self.floating:
            return f"float {self.lhs} => {tmpl}"
        items = " ".join(str(it) for it in self.rhs)
        return f"rule {self.lhs} := {items} => {tmpl}"


def _sub_categories(c: Category):
    yield c
    if isinstance(c, (Forward, Backward)):
        yield from _sub_categories(c.result)
        yield from _sub_categories(c.arg)


@dataclass
class Grammar:
    rules: list
    include_application: bool = False
    include_numbers: bool = True

    def __post_init__(self):
        for i, r in enumerate(self.rules, 1):
            if r.id != i:
                raise GrammarError(f"rule ids must be dense from 1 (got {r.id} at {i})")
        for r in self.rules:
            if ROOT in r.nonterminals:
                raise GrammarError(f"ROOT may only appear as a left-hand side: {r}")
        self._check_unary_cycles()
        self.application_rules = self._application_rules() if self.include_application else []
        # token -> categories produced by single-terminal lexical rules
        self.lexicon = {}
        for r in self.rules:
            if len(r.rhs) == 1 and isinstance(r.rhs[0], Terminal):
                self.lexicon.setdefault(r.rhs[0].token, set()).add(r.lhs)

    @property
    def anchored_rules(self):
        return [r for r in self.rules if not r.floating] + self.application_rules

    @property
    def floating_rules(self):
        return [r for r in self.rules if r.floating]

    def categories(self) -> set:
        cats = set()
        for r in self.rules:
            for c in (r.lhs, *r.nonterminals):
                cats.update(_sub_categories(c))
        return cats

    def _application_rules(self):
        out = []
        slashed = sorted(
            (c for c in self.categories() if isinstance(c, (Forward, Backward))), key=str
        )
        for c in slashed:
            if isinstance(c, Forward):
                rhs = (NonTerminal(c), NonTerminal(c.arg))
                out.append(Rule(0, c.result, rhs, Application("forward")))
            else:
                rhs = (NonTerminal(c.arg), NonTerminal(c))
                out.append(Rule(0, c.result, rhs, Application("backward")))
        return out

    def _check_unary_cycles(self):
        edges = {}
        for r in self.rules:
            if not r.floating and len(r.rhs) == 1 and isinstance(r.rhs[0], NonTerminal):
                edges.setdefault(r.rhs[0].category, set()).add(r.lhs)
        state = {}

        def visit(c, stack):
            if state.get(c) == 1:
                raise GrammarError(f"cycle of unary rules through {c}")
            if state.get(c) == 2:
                return
            state[c] = 1
            for d in edges.get(c, ()):
                visit(d, stack)
            state[c] = 2

        for c in list(edges):
            visit(c, [])


# ---------------------------------------------------------------------------
# DSL loading


def _parse_items(text: str, lineno: int) -> tuple:
    items = []
    try:
        parts = shlex.split(text, posix=False)
    except ValueError as e:
        raise GrammarError(str(e), lineno) from None
    for part in parts:
        if len(part) >= 2 and part[0] == part[-1] == '"':
            words = part[1:-1].split()
            if not words:
                raise GrammarError("empty terminal", lineno)
            items.extend(Terminal(w.lower()) for w in words)
        elif part == "_":
            items.append(Wildcard())
        else:
            try:
                items.append(NonTerminal(parse_category(part)))
            except ValueError as e:
                raise GrammarError(str(e), lineno) from None
    return tuple(items)


def _make_template(text, n_children, lineno):
    try:
        t, max_child = parse_template(text)
    except (LFSyntaxError, TemplateError) as e:
        raise GrammarError(f"template {text!r}: {e}", lineno) from None
    if max_child > n_children:
        raise GrammarError(f"${max_child} out of range ({n_children} nonterminals)", lineno)
    return t


def parse_grammar(text: str) -> Grammar:
    rules = []
    options = {"application": False, "numbers": True}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head == "option":
            fields = rest.split()
            if len(fields) != 2 or fields[0] not in options or fields[1] not in ("on", "off"):
                raise GrammarError(f"bad option {rest!r}", lineno)
            options[fields[0]] = fields[1] == "on"
        elif head == "rule":
            lhs_text, sep, body = rest.partition(":=")
            items_text, sep2, tmpl_text = body.partition("=>")
            if not sep or not sep2:
                raise GrammarError("expected 'rule CAT := items => template'", lineno)
            try:
                lhs = parse_category(lhs_text)
            except ValueError as e:
                raise GrammarError(str(e), lineno) from None
            items = _parse_items(items_text, lineno)
            if not items:
                raise GrammarError("anchored rule with empty right-hand side", lineno)
            n_nt = sum(isinstance(it, NonTerminal) for it in items)
            if n_nt > 2:
                raise GrammarError(f"{n_nt} nonterminals (at most 2 allowed)", lineno)
            tmpl = _make_template(tmpl_text.strip(), n_nt, lineno)
            try:
                rules.append(Rule(len(rules) + 1, lhs, items, tmpl))
            except GrammarError as e:
                raise GrammarError(str(e), lineno) from None
        elif head == "float":
            lhs_text, sep, tmpl_text = rest.partition("=>")
            if not sep:
                raise GrammarError("expected 'float CAT => template'", lineno)
            try:
                lhs = parse_category(lhs_text)
            except ValueError as e:
                raise GrammarError(str(e), lineno) from None
            tmpl = _make_template(tmpl_text.strip(), 0, lineno)
            rules.append(Rule(len(rules) + 1, lhs, (), tmpl, floating=True))
        else:
            raise GrammarError(f"unknown directive {head!r}", lineno)
    return Grammar(rules, options["application"], options["numbers"])


def load_grammar(path) -> Grammar:
    return parse_grammar(Path(path).read_text(encoding="utf-8"))


def validate_grammar(g: Grammar, schema) -> list:
    """Warnings for undefined predicates and categories that cannot reach ROOT."""
    warnings = []
    known = schema.predicates() if schema is not None else None
    for r in g.rules:
        if known is None:
            break
        for name in _template_predicates(r.template):
            if name not in known:
                warnings.append(f"rule {r.id}: undefined predicate {name!r}")
    feeds = {}
    for r in g.rules + g.application_rules:
        for c in r.nonterminals:
            feeds.setdefault(c, set()).add(r.lhs)
    produced = {r.lhs for r in g.rules}
    if g.include_numbers:
        produced |= {Atom("N"), Atom("NP")} & (g.categories())
    reach = {ROOT}
    changed = True
    while changed:
        changed = False
        for c, parents in feeds.items():
            if c not in reach and parents & reach:
                reach.add(c)
                changed = True
    for c in sorted(produced | set(feeds), key=str):
        if c not in reach:
            warnings.append(f"category {c} cannot reach ROOT")
    return warnings


def _template_predicates(t):
    out = []

    def walk(x):
        if isinstance(x, (Unary, Rel)):
            out.append(x.pred)
        for k in _children(x):
            walk(k)

    if not isinstance(t, Application):
        walk(t)
    return out
