"""Chart parsing with per-cell beams, plus an exhaustive enumerator.

Anchored derivations live in chart cells keyed by ``(span, category)``.
Floating derivations (built from rules with no lexical trigger) live in
a pool keyed by ``(category, floating count)`` and may fill any
nonterminal slot without consuming tokens.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field

from semparse.grammar import (
    ROOT,
    Atom,
    Category,
    CategoryMismatch,
    Grammar,
    NonTerminal,
    Rule,
    Terminal,
    TemplateError,
    Wildcard,
    is_complete,
)
from semparse.kb import parse_value
from semparse.logic import (
    Number,
    Rel,
    TRelation,
    TypeMismatch,
    UnknownPredicate,
    is_number,
    serialize_lf,
    typecheck,
)

NUMBER_CATEGORIES = (Atom("NP"), Atom("N"))


class EnumerationLimitError(RuntimeError):
    pass


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 200
    max_floating: int = 2

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")
        if self.max_floating < 0:
            raise ValueError("max floating must be >= 0")


@dataclass(slots=True, eq=False)
class Derivation:
    rule_id: int
    category: Category
    span: tuple | None  # [i, j) or None for floating derivations
    children: tuple
    sem: object
    floating_count: int = 0
    features: dict | None = None
    score: float = 0.0
    rule: Rule | None = field(default=None, repr=False)
    structural: dict | None = field(default=None, repr=False)
    _text: str | None = field(default=None, repr=False)

    @property
    def lf_text(self) -> str:
        if self._text is None:
            self._text = serialize_lf(self.sem)
        return self._text

    @property
    def is_floating(self) -> bool:
        return self.span is None

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def _sort_key(d: Derivation):
    return (-d.score, d.lf_text)


def _number_token(tok: str):
    v = parse_value(tok)
    return v if is_number(v) else None


class _TypeFilter:
    """Type-check complete values once per logical form."""

    def __init__(self, context):
        self.context = context
        self.cache = {}

    def __call__(self, sem) -> bool:
        if not is_complete(sem) or self.context is None:
            return True
        ok = self.cache.get(sem)
        if ok is None:
            ok = self._check(sem)
            self.cache[sem] = ok
        return ok

    def _check(self, sem) -> bool:
        try:
            if isinstance(sem, Rel):
                return isinstance(self.context.type_of(sem.pred), TRelation)
            typecheck(sem, self.context)
        except TypeMismatch:
            return False
        except UnknownPredicate:
            return True  # executes to an error; surfaced as a feature
        return True


def _build(rule: Rule, span, kids, well_typed):
    try:
        sem = rule.build([k.sem for k in kids])
    except (TemplateError, CategoryMismatch):
        return None
    if not well_typed(sem):
        return None
    fc = sum(k.floating_count for k in kids) + (1 if rule.floating else 0)
    return Derivation(rule.id, rule.lhs, span, tuple(kids), sem, fc, rule=rule)


def _number_derivations(tokens, i, grammar: Grammar):
    if not grammar.include_numbers:
        return []
    tok = tokens[i]
    v = _number_token(tok)
    if v is None:
        return []
    explicit = grammar.lexicon.get(tok, set())
    return [
        Derivation(0, cat, (i, i + 1), (), Number(float(v)))
        for cat in NUMBER_CATEGORIES
        if cat not in explicit
    ]


# ---------------------------------------------------------------------------
# Beam chart parser


class ChartParser:
    def __init__(self, tokens, context, grammar: Grammar, scorer=None, config=None):
        self.tokens = list(tokens)
        self.n = len(self.tokens)
        self.context = context
        self.grammar = grammar
        self.scorer = scorer
        self.config = config or BeamConfig()
        self.K = self.config.beam_size
        self.max_floating = self.config.max_floating
        self.well_typed = _TypeFilter(context)
        self.cells = defaultdict(dict)  # (i, j) -> category -> [Derivation]
        self.pool = {}  # category -> [Derivation]
        anchored = grammar.anchored_rules
        self.lexical_rules = [r for r in anchored if r.lexical]
        self.nt_rules = [r for r in anchored if not r.lexical]

    def _score(self, d: Derivation) -> Derivation:
        d.score = float(self.scorer(d)) if self.scorer is not None else 0.0
        return d

    def _prune(self, derivs):
        derivs.sort(key=_sort_key)
        del derivs[self.K:]
        return derivs

    # -- floating pool -----------------------------------------------------

    def _build_pool(self):
        if self.max_floating < 1:
            return
        groups = defaultdict(list)  # (category, count) -> derivations
        frontier = []
        for r in self.grammar.floating_rules:
            d = _build(r, None, (), self.well_typed)
            if d is not None:
                groups[(d.category, 1)].append(self._score(d))
        for key in groups:
            self._prune(groups[key])
            frontier.extend(groups[key])
        self._refresh_pool(groups)
        while frontier:
            new_ids = {id(d) for d in frontier}
            fresh = defaultdict(list)
            for r in self.nt_rules:
                slots = r.nonterminals
                options = [self.pool.get(c, ()) for c in slots]
                for kids in itertools.product(*options):
                    if not any(id(k) in new_ids for k in kids):
                        continue
                    if sum(k.floating_count for k in kids) > self.max_floating:
                        continue
                    d = _build(r, None, kids, self.well_typed)
                    if d is not None:
                        fresh[(d.category, d.floating_count)].append(self._score(d))
            frontier = []
            for key, ds in fresh.items():
                merged = self._prune(groups[key] + ds)
                groups[key] = merged
                keep = {id(d) for d in ds}
                frontier.extend(d for d in merged if id(d) in keep)
            self._refresh_pool(groups)

    def _refresh_pool(self, groups):
        pool = defaultdict(list)
        for (cat, _), ds in sorted(groups.items(), key=lambda kv: kv[0][1]):
            pool[cat].extend(ds)
        self.pool = dict(pool)

    # -- anchored spans ------------------------------------------------------

    def _matches(self, rule: Rule, i: int, j: int):
        """Yield child tuples that realise ``rule`` over exactly [i, j).

        Anchored children must cover strict sub-spans; floating children
        consume nothing.
        """
        items = rule.rhs
        tokens = self.tokens
        cells = self.cells
        pool = self.pool
        max_f = self.max_floating
        last = len(items)

        def rec(p, t, kids, fc):
            if p == last:
                if t == j:
                    yield tuple(kids)
                return
            item = items[p]
            if isinstance(item, Terminal):
                if t < j and tokens[t] == item.token:
                    yield from rec(p + 1, t + 1, kids, fc)
                return
            if isinstance(item, Wildcard):
                if t < j:
                    yield from rec(p + 1, t + 1, kids, fc)
                return
            cat = item.category
            for d in pool.get(cat, ()):
                if fc + d.floating_count <= max_f:
                    kids.append(d)
                    yield from rec(p + 1, t, kids, fc + d.floating_count)
                    kids.pop()
            for e in range(t + 1, j + 1):
                if t == i and e == j:
                    continue
                cell = cells.get((t, e))
                if not cell:
                    continue
                for d in cell.get(cat, ()):
                    if fc + d.floating_count <= max_f:
                        kids.append(d)
                        yield from rec(p + 1, e, kids, fc + d.floating_count)
                        kids.pop()

        yield from rec(0, i, [], 0)

    def _lexical_ok(self, rule: Rule, i: int, j: int) -> bool:
        first, final = rule.rhs[0], rule.rhs[-1]
        if isinstance(first, Terminal) and self.tokens[i] != first.token:
            return False
        if isinstance(final, Terminal) and self.tokens[j - 1] != final.token:
            return False
        return True

    def _insert(self, cell, candidates):
        """Merge candidates into a cell; return the ones that survived."""
        survivors = []
        for cat, ds in candidates.items():
            merged = self._prune(cell.get(cat, []) + ds)
            cell[cat] = merged
            keep = {id(d) for d in ds}
            survivors.extend(d for d in merged if id(d) in keep)
        return survivors

    def _fill_span(self, i: int, j: int):
        cell = self.cells[(i, j)]
        candidates = defaultdict(list)
        if j == i + 1:
            for d in _number_derivations(self.tokens, i, self.grammar):
                candidates[d.category].append(self._score(d))
        for r in self.lexical_rules:
            if not self._lexical_ok(r, i, j):
                continue
            for kids in self._matches(r, i, j):
                d = _build(r, (i, j), kids, self.well_typed)
                if d is not None:
                    candidates[d.category].append(self._score(d))
        if j - i > 1:
            for r in self.nt_rules:
                for kids in self._matches(r, i, j):
                    d = _build(r, (i, j), kids, self.well_typed)
                    if d is not None:
                        candidates[d.category].append(self._score(d))
        frontier = self._insert(cell, candidates)
        # same-span closure: one anchored child covering [i, j), the rest floating
        while frontier:
            by_cat = defaultdict(list)
            for d in frontier:
                by_cat[d.category].append(d)
            candidates = defaultdict(list)
            for r in self.nt_rules:
                slots = r.nonterminals
                for s, cat in enumerate(slots):
                    anchors = by_cat.get(cat)
                    if not anchors:
                        continue
                    others = [
                        [None] if k == s else self.pool.get(c, ())
                        for k, c in enumerate(slots)
                    ]
                    for a in anchors:
                        for combo in itertools.product(*others):
                            kids = tuple(a if k == s else x for k, x in enumerate(combo))
                            if sum(k.floating_count for k in kids) > self.max_floating:
                                continue
                            d = _build(r, (i, j), kids, self.well_typed)
                            if d is not None:
                                candidates[d.category].append(self._score(d))
            frontier = self._insert(cell, candidates)

    def run(self):
        if self.n == 0:
            return []
        self._build_pool()
        for length in range(1, self.n + 1):
            for i in range(0, self.n - length + 1):
                self._fill_span(i, i + length)
        roots = [d for d in self.cells[(0, self.n)].get(ROOT, []) if is_complete(d.sem)]
        roots.sort(key=_sort_key)
        return roots


def parse(tokens, context, grammar: Grammar, scorer=None, config: BeamConfig | None = None):
    """Beam-search chart parse; returns ROOT derivations by descending score."""
    return ChartParser(tokens, context, grammar, scorer, config).run()


# ---------------------------------------------------------------------------
# Exhaustive enumeration (test oracle)


class _Enumerator:
    """Top-down, memoised enumeration of every licensed derivation."""

    def __init__(self, tokens, context, grammar: Grammar, max_floating: int, limit: int):
        self.tokens = list(tokens)
        self.grammar = grammar
        self.max_floating = max_floating
        self.limit = limit
        self.created = 0
        self.well_typed = _TypeFilter(context)
        self.by_lhs = defaultdict(list)
        for r in grammar.anchored_rules:
            self.by_lhs[r.lhs].append(r)
        self.float_by_lhs = defaultdict(list)
        for r in grammar.floating_rules:
            self.float_by_lhs[r.lhs].append(r)
        self.memo = {}
        self.float_memo = {}

    def _new(self, rule, span, kids):
        d = _build(rule, span, kids, self.well_typed)
        if d is not None:
            self.created += 1
            if self.created > self.limit:
                raise EnumerationLimitError(f"more than {self.limit} derivations")
        return d

    def floating(self, cat, budget):
        if budget < 1:
            return []
        key = (cat, budget)
        if key in self.float_memo:
            return self.float_memo[key]
        out = []
        for r in self.float_by_lhs.get(cat, ()):
            d = self._new(r, None, ())
            if d is not None:
                out.append(d)
        for r in self.by_lhs.get(cat, ()):
            if r.lexical:
                continue
            for kids in self._float_fill(r.nonterminals, budget):
                d = self._new(r, None, kids)
                if d is not None:
                    out.append(d)
        self.float_memo[key] = out
        return out

    def _float_fill(self, cats, budget):
        if not cats:
            yield ()
            return
        # every floating child costs at least one
        for d in self.floating(cats[0], budget - (len(cats) - 1)):
            for rest in self._float_fill(cats[1:], budget - d.floating_count):
                yield (d,) + rest

    def derive(self, cat, i, j, budget):
        key = (cat, i, j, budget)
        if key in self.memo:
            return self.memo[key]
        out = []
        if j == i + 1:
            out.extend(d for d in _number_derivations(self.tokens, i, self.grammar)
                       if d.category == cat)
        for r in self.by_lhs.get(cat, ()):
            nt_positions = [p for p, it in enumerate(r.rhs) if isinstance(it, NonTerminal)]
            for mask in itertools.product((False, True), repeat=len(nt_positions)):
                floating_pos = [p for p, f in zip(nt_positions, mask) if f]
                consuming = [p for p in range(len(r.rhs)) if p not in floating_pos]
                if not consuming:
                    continue
                for fl in self._float_fill(
                    tuple(r.rhs[p].category for p in floating_pos), budget
                ):
                    spent = sum(d.floating_count for d in fl)
                    assigned = dict(zip(floating_pos, fl))
                    for anchored in self._tile(r, consuming, 0, i, j, budget - spent):
                        assigned.update(anchored)
                        kids = tuple(assigned[p] for p in nt_positions)
                        d = self._new(r, (i, j), kids)
                        if d is not None:
                            out.append(d)
        self.memo[key] = out
        return out

    def _tile(self, rule, consuming, k, t, j, budget):
        """Assign consuming items consuming[k:] to tokens [t, j)."""
        if k == len(consuming):
            if t == j:
                yield {}
            return
        p = consuming[k]
        item = rule.rhs[p]
        if isinstance(item, Terminal):
            if t < j and self.tokens[t] == item.token:
                yield from self._tile(rule, consuming, k + 1, t + 1, j, budget)
            return
        if isinstance(item, Wildcard):
            if t < j:
                yield from self._tile(rule, consuming, k + 1, t + 1, j, budget)
            return
        # leave at least one token for each remaining consuming item
        remaining = len(consuming) - k - 1
        for e in range(t + 1, j - remaining + 1):
            for d in self.derive(item.category, t, e, budget):
                for rest in self._tile(rule, consuming, k + 1, e, j, budget - d.floating_count):
                    rest = dict(rest)
                    rest[p] = d
                    yield rest


def enumerate_derivations(tokens, context, grammar: Grammar, max_floating: int = 2,
                          limit: int = 10 ** 6):
    """Every ROOT derivation licensed by the grammar, without beam truncation."""
    tokens = list(tokens)
    if not tokens:
        return []
    en = _Enumerator(tokens, context, grammar, max_floating, limit)
    roots = [d for d in en.derive(ROOT, 0, len(tokens), max_floating) if is_complete(d.sem)]
    roots.sort(key=lambda d: d.lf_text)
    return roots


# ---------------------------------------------------------------------------
# Rendering


def render_derivation(d: Derivation, tokens, indent: int = 0) -> str:
    pad = "  " * indent
    if d.rule is None:
        how = "number"
    elif d.rule.id == 0:
        how = d.rule.template.to_text()
    else:
        how = f"rule {d.rule.id}"
    if d.span is None:
        where = "floating"
    else:
        words = " ".join(tokens[d.span[0]:d.span[1]])
        where = f"[{d.span[0]},{d.span[1]}) {words!r}"
    lines = [f"{pad}{d.category}[{d.lf_text}]  ({how}) {where}"]
    for c in d.children:
        lines.append(render_derivation(c, tokens, indent + 1))
    return "\n".join(lines)
