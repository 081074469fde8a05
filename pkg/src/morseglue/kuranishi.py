"""Combinatorial layer of minimal semi-global Kuranishi structures.

Index tuples are chainable sequences of moduli labels; contraction replaces a
contiguous sub-chain by the moduli space of its glued total.  This module
implements the catalog ordering, contraction, the partial order, stratum
enumeration, the iterated-equals-simultaneous identities, and chart-cover
validation over travel-time boxes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import IncomparableContractions, InvalidCollection, MissingModuli


@dataclass(frozen=True)
class CatalogEntry:
    index: int                 # 1-based position in the energy ordering
    source: str
    target: str
    energy: float


class ModuliCatalog:
    """Moduli labels sorted by increasing energy f(source) - f(target)."""

    def __init__(self, crit_values):
        """crit_values: list of (id, f value)."""
        pairs = []
        fmap = dict(crit_values)
        for a, fa in crit_values:
            for b, fb in crit_values:
                if fa > fb:
                    pairs.append((a, b, fa - fb))
        pairs.sort(key=lambda t: (t[2], fmap[t[0]]))
        self.entries = [CatalogEntry(i + 1, a, b, e) for i, (a, b, e) in enumerate(pairs)]
        self._by_pair = {(e.source, e.target): e.index for e in self.entries}
        self.f_values = fmap

    @classmethod
    def from_setup(cls, setup):
        return cls([(c.id, c.f_value) for c in setup.critical_points])

    def __len__(self):
        return len(self.entries)

    def entry(self, i) -> CatalogEntry:
        return self.entries[i - 1]

    def source(self, i):
        return self.entry(i).source

    def target(self, i):
        return self.entry(i).target

    def lookup(self, source, target):
        key = (source, target)
        if key not in self._by_pair:
            raise MissingModuli(f"no moduli space with source {source} and target {target}")
        return self._by_pair[key]

    def is_valid_tuple(self, tup):
        if not tup:
            return False
        try:
            for i in tup:
                self.entry(i)
        except IndexError:
            return False
        return all(self.target(tup[m]) == self.source(tup[m + 1])
                   for m in range(len(tup) - 1))


def contract_full(catalog: ModuliCatalog, tup) -> int:
    """The single catalog index with the tuple's total source and target."""
    tup = tuple(tup)
    if not catalog.is_valid_tuple(tup):
        raise InvalidCollection(f"{tup} is not a valid index tuple")
    return catalog.lookup(catalog.source(tup[0]), catalog.target(tup[-1]))


def _resolve_collection(catalog, tup, collection):
    """Turn a collection of sub-tuples into disjoint position intervals."""
    tup = tuple(tup)
    intervals = []
    items = [tuple(c) for c in collection if len(tuple(c))]
    if not items:
        return []

    def place(idx, used):
        if idx == len(items):
            return []
        sub = items[idx]
        n = len(sub)
        for start in range(len(tup) - n + 1):
            span = set(range(start, start + n))
            if tup[start:start + n] == sub and not (span & used):
                rest = place(idx + 1, used | span)
                if rest is not None:
                    return [(start, start + n)] + rest
        return None

    placed = place(0, set())
    if placed is None:
        raise InvalidCollection(
            f"collection {collection} is not a set of non-overlapping contiguous "
            f"sub-index tuples of {tup}")
    for a, b in placed:
        if not catalog.is_valid_tuple(tup[a:b]):
            raise InvalidCollection(f"sub-tuple {tup[a:b]} is not chained")
    return sorted(placed)


def contract_along(catalog: ModuliCatalog, tup, collection):
    """Replace each sub-tuple of the collection by its full contraction."""
    tup = tuple(tup)
    if not catalog.is_valid_tuple(tup):
        raise InvalidCollection(f"{tup} is not a valid index tuple")
    intervals = _resolve_collection(catalog, tup, collection)
    out = []
    pos = 0
    for a, b in intervals:
        out.extend(tup[pos:a])
        out.append(contract_full(catalog, tup[a:b]))
        pos = b
    out.extend(tup[pos:])
    result = tuple(out)
    if not catalog.is_valid_tuple(result):
        raise InvalidCollection(f"contraction of {tup} along {collection} broke chaining")
    return result


def _interval_collections(n):
    """All sets of disjoint contiguous intervals of length >= 2 inside range(n)."""
    intervals = [(a, b) for a in range(n) for b in range(a + 2, n + 1)]

    def rec(start):
        yield []
        for (a, b) in intervals:
            if a < start:
                continue
            for rest in rec(b):
                yield [(a, b)] + rest
    yield from rec(0)


def contractions_of(catalog, tup):
    """All tuples obtainable by contracting some sub-index collection."""
    tup = tuple(tup)
    seen = set()
    for coll in _interval_collections(len(tup)):
        out = []
        pos = 0
        for a, b in sorted(coll):
            out.extend(tup[pos:a])
            out.append(contract_full(catalog, tup[a:b]))
            pos = b
        out.extend(tup[pos:])
        seen.add(tuple(out))
    return seen


def tuple_leq(catalog: ModuliCatalog, tup_j, tup_i) -> bool:
    """J <= I iff J arises from I by contracting a sub-index collection."""
    tup_j, tup_i = tuple(tup_j), tuple(tup_i)
    if contract_full(catalog, tup_j) != contract_full(catalog, tup_i):
        raise IncomparableContractions(
            f"{tup_j} and {tup_i} have different full contractions")
    return tup_j in contractions_of(catalog, tup_i)


def enumerate_strata(catalog: ModuliCatalog, level) -> list:
    """All index tuples with full contraction ``level``, sorted by length."""
    src = catalog.source(level)
    tgt = catalog.target(level)
    out = []

    def rec(prefix, at):
        if at == tgt and prefix:
            out.append(tuple(prefix))
            # do not return: no further extension possible anyway (energy drops)
        for e in catalog.entries:
            if e.source == at and catalog.f_values[e.target] >= catalog.f_values[tgt]:
                rec(prefix + [e.index], e.target)

    rec([], src)
    strata = [t for t in out if catalog.target(t[-1]) == tgt]
    strata.sort(key=lambda t: (len(t), t))
    return strata


def check_iterated_equals_simultaneous(catalog: ModuliCatalog, max_len) -> dict:
    """Exhaustive substitution/contraction identities up to tuples of max_len.

    For every tuple K and contiguous sub-tuple I, contracting I must yield a
    valid J with the same full contraction, and contracting disjoint
    sub-collections in either order must agree (the combinatorial shadow of
    iterated gluing = simultaneous gluing).
    """
    checked_subst = 0
    checked_assoc = 0
    violations = []
    all_tuples = []
    for level in range(1, len(catalog) + 1):
        all_tuples.extend(t for t in enumerate_strata(catalog, level) if len(t) <= max_len)

    for tup in all_tuples:
        n = len(tup)
        full = contract_full(catalog, tup)
        for a in range(n):
            for b in range(a + 2, n + 1):
                sub = tup[a:b]
                j = contract_along(catalog, tup, [sub])
                checked_subst += 1
                if contract_full(catalog, j) != full:
                    violations.append(("contraction changed the total", tup, sub))
                rebuilt = j[:a] + sub + j[a + 1:]
                if rebuilt != tup:
                    violations.append(("substitution does not invert", tup, sub))
                if not tuple_leq(catalog, j, tup):
                    violations.append(("contraction not below the tuple", tup, sub))
        # associativity over disjoint interval pairs
        for (a1, b1) in ((a, b) for a in range(n) for b in range(a + 2, n + 1)):
            for (a2, b2) in ((a, b) for a in range(b1, n) for b in range(a + 2, n + 1)):
                both = _contract_intervals(catalog, tup, [(a1, b1), (a2, b2)])
                first = _contract_intervals(catalog, tup, [(a1, b1)])
                shift = (b1 - a1) - 1
                second = _contract_intervals(catalog, first,
                                             [(a2 - shift, b2 - shift)])
                checked_assoc += 1
                if both != second:
                    violations.append(("nested contraction order", tup, (a1, b1, a2, b2)))
    return {"tuples": len(all_tuples), "substitution_checks": checked_subst,
            "associativity_checks": checked_assoc, "violations": violations,
            "ok": not violations}


def _contract_intervals(catalog, tup, intervals):
    out = []
    pos = 0
    for a, b in sorted(intervals):
        out.extend(tup[pos:a])
        out.append(contract_full(catalog, tup[a:b]))
        pos = b
    out.extend(tup[pos:])
    return tuple(out)


# -- chart-cover validation over travel-time boxes --------------------------------


@dataclass
class Region:
    """Union of axis-aligned boxes in travel-time coordinates ([0, inf) allowed)."""

    boxes: list                    # [(lo array, hi array)]

    def overlaps(self, other) -> bool:
        for lo1, hi1 in self.boxes:
            for lo2, hi2 in other.boxes:
                if np.all(np.maximum(lo1, lo2) < np.minimum(hi1, hi2)):
                    return True
        return False

    def contains(self, pt) -> bool:
        return any(np.all(pt >= lo) and np.all(pt <= hi) for lo, hi in self.boxes)


def validate_chart_cover(catalog, strata_charts, cover_cap=20.0, samples=41) -> dict:
    """Check K1(b): regions overlap iff their tuples are comparable; also check
    that the union covers the sampled travel-time quadrant."""
    violations = []
    for (ti, ri), (tj, rj) in itertools.combinations(strata_charts, 2):
        try:
            comparable = tuple_leq(catalog, ti, tj) or tuple_leq(catalog, tj, ti)
        except IncomparableContractions:
            comparable = False
        overlap = ri.overlaps(rj)
        if overlap != comparable:
            kind = "incomparable charts overlap" if overlap else \
                "comparable charts do not meet"
            violations.append({"kind": kind, "tuples": (ti, tj)})
    ndim = len(strata_charts[0][1].boxes[0][0])
    axes = [np.linspace(0.0, cover_cap, samples)] * ndim
    uncovered = 0
    for pt in itertools.product(*axes):
        if not any(r.contains(np.asarray(pt)) for _, r in strata_charts):
            uncovered += 1
    return {"violations": violations, "uncovered_samples": uncovered,
            "ok": not violations and uncovered == 0}


def _box(lo, hi):
    return (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


def torus_level6_layout(catalog, mutant=False):
    """Travel-time chart layout for the top-energy torus stratum.

    Coordinates are (tau at the upper saddle, tau at the lower saddle).  The
    two incomparable two-level charts are separated; the mutant widens both
    until they meet, which must fail validation.
    """
    inf = np.inf
    strata = enumerate_strata(catalog, len(catalog))
    by_len = {}
    for t in strata:
        by_len.setdefault(len(t), []).append(t)
    single = by_len[1][0]
    chains3 = by_len[3][0]
    two_level = by_len[2]
    # chart (a, b) with breaking at the upper saddle has large tau_1
    upper_first = next(t for t in two_level
                       if catalog.target(t[0]) == catalog.target(chains3[0]))
    lower_first = next(t for t in two_level if t != upper_first)
    wide = 4.5 if mutant else 3.2
    charts = [
        (single, Region([_box((0, 0), (4.5, 2.5)), _box((0, 0), (2.5, 4.5)),
                         _box((0, 0), (4.2, 3.4)), _box((0, 0), (3.4, 4.2))])),
        (upper_first, Region([_box((4.0, 0), (inf, wide))])),
        (lower_first, Region([_box((0, 4.0), (wide, inf))])),
        (chains3, Region([_box((3.0, 3.0), (inf, inf))])),
    ]
    return charts
