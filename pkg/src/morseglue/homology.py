"""Morse chain complex, d^2 = 0 verification, and homology via Smith normal form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IncompleteData, NotAComplex


@dataclass
class ChainComplex:
    ring: str                          # "Z" or "Z2"
    generators: dict                   # grade -> list of critical point ids
    boundaries: dict                   # grade k -> integer matrix C_k -> C_{k-1}
    provenance: dict = field(default_factory=dict)   # (gen_to, gen_from) -> contributions

    def grades(self):
        return sorted(self.generators)

    def matrix(self, k):
        rows = len(self.generators.get(k - 1, []))
        cols = len(self.generators.get(k, []))
        m = self.boundaries.get(k)
        if m is None:
            return np.zeros((rows, cols), dtype=np.int64)
        return m


def build_chain_complex(setup, counts, ring="Z") -> ChainComplex:
    """Assemble boundary matrices from signed counts.

    ``counts`` maps (source id, target id) -> list of (sign, provenance dict)
    for every pair with index difference one.  Missing pairs raise
    IncompleteData.
    """
    gens = {}
    for c in setup.critical_points:
        gens.setdefault(c.morse_index, []).append(c.id)
    for k in gens:
        gens[k].sort(key=lambda cid: -setup.crit(cid).f_value)

    gaps = []
    for a in setup.critical_points:
        for b in setup.critical_points:
            if a.morse_index == b.morse_index + 1 and (a.id, b.id) not in counts:
                gaps.append((a.id, b.id))
    if gaps:
        raise IncompleteData("unresolved index-difference-one moduli", gaps=gaps)

    boundaries = {}
    provenance = {}
    for k in sorted(gens):
        if k - 1 not in gens:
            continue
        rows, cols = gens[k - 1], gens[k]
        m = np.zeros((len(rows), len(cols)), dtype=np.int64)
        for j, a in enumerate(cols):
            for i, b in enumerate(rows):
                entries = counts.get((a, b), [])
                total = sum(sign for sign, _ in entries)
                if ring == "Z2":
                    total = len(entries) % 2
                m[i, j] = total
                if entries:
                    provenance[(b, a)] = [info for _, info in entries]
        boundaries[k] = m
    return ChainComplex(ring=ring, generators=gens, boundaries=boundaries,
                        provenance=provenance)


def verify_d_squared(cc: ChainComplex) -> bool:
    """Exact matrix identity d_{k-1} d_k = 0 (mod 2 over Z2)."""
    for k in cc.grades():
        m1 = cc.matrix(k)
        m0 = cc.matrix(k - 1)
        if m0.size and m1.size:
            prod = m0 @ m1
            if cc.ring == "Z2":
                prod = prod % 2
            if np.any(prod != 0):
                return False
    return True


def smith_normal_form(matrix):
    """(U, D, V) with U @ matrix @ V = D diagonal, U, V unimodular.

    Plain integer pivoting on the smallest nonzero entry; inputs are small.
    """
    a = [[int(x) for x in row] for row in np.atleast_2d(matrix)]
    n_rows = len(a)
    n_cols = len(a[0]) if n_rows else 0
    u = np.eye(n_rows, dtype=object)
    v = np.eye(n_cols, dtype=object)
    a = np.array(a, dtype=object) if n_rows and n_cols else np.zeros((n_rows, n_cols),
                                                                     dtype=object)

    def min_pivot(t):
        best = None
        for i in range(t, n_rows):
            for j in range(t, n_cols):
                if a[i, j] != 0 and (best is None or abs(a[i, j]) < abs(a[best[0], best[1]])):
                    best = (i, j)
        return best

    t = 0
    while t < min(n_rows, n_cols):
        piv = min_pivot(t)
        if piv is None:
            break
        i0, j0 = piv
        a[[t, i0]] = a[[i0, t]]
        u[[t, i0]] = u[[i0, t]]
        a[:, [t, j0]] = a[:, [j0, t]]
        v[:, [t, j0]] = v[:, [j0, t]]
        dirty = False
        for i in range(t + 1, n_rows):
            if a[i, t] % a[t, t] != 0:
                dirty = True
            qt = a[i, t] // a[t, t]
            a[i] -= qt * a[t]
            u[i] -= qt * u[t]
        for j in range(t + 1, n_cols):
            if a[t, j] % a[t, t] != 0:
                dirty = True
            qt = a[t, j] // a[t, t]
            a[:, j] -= qt * a[:, t]
            v[:, j] -= qt * v[:, t]
        if dirty or np.any(a[t + 1:, t]) or np.any(a[t, t + 1:]):
            continue
        # divisibility: fold in any entry the pivot does not divide
        rest = a[t + 1:, t + 1:]
        bad = None
        for i in range(rest.shape[0]):
            for j in range(rest.shape[1]):
                if rest[i, j] % a[t, t] != 0:
                    bad = (t + 1 + i, t + 1 + j)
                    break
            if bad:
                break
        if bad:
            a[t] += a[bad[0]]
            u[t] += u[bad[0]]
            continue
        if a[t, t] < 0:
            a[t] = -a[t]
            u[t] = -u[t]
        t += 1
    return u, a, v


def _rank_mod2(matrix):
    m = (np.atleast_2d(matrix) % 2).astype(np.int8)
    rank = 0
    rows, cols = m.shape
    r = 0
    for c in range(cols):
        piv = None
        for i in range(r, rows):
            if m[i, c]:
                piv = i
                break
        if piv is None:
            continue
        m[[r, piv]] = m[[piv, r]]
        for i in range(rows):
            if i != r and m[i, c]:
                m[i] = (m[i] + m[r]) % 2
        r += 1
        rank += 1
    return rank


def homology_ranks(cc: ChainComplex):
    """[(grade, betti, torsion list)] from SNF over Z, Gaussian ranks over Z2."""
    if not verify_d_squared(cc):
        raise NotAComplex("boundary matrices do not square to zero")
    out = []
    for k in cc.grades():
        n_k = len(cc.generators[k])
        m_k = cc.matrix(k)
        m_k1 = cc.matrix(k + 1)
        if cc.ring == "Z2":
            rank_k = _rank_mod2(m_k) if m_k.size else 0
            rank_k1 = _rank_mod2(m_k1) if m_k1.size else 0
            out.append((k, n_k - rank_k - rank_k1, []))
            continue
        _, d_k, _ = smith_normal_form(m_k)
        _, d_k1, _ = smith_normal_form(m_k1)
        diag_k = [int(d_k[i, i]) for i in range(min(d_k.shape)) if d_k[i, i] != 0] \
            if d_k.size else []
        diag_k1 = [int(d_k1[i, i]) for i in range(min(d_k1.shape)) if d_k1[i, i] != 0] \
            if d_k1.size else []
        betti = n_k - len(diag_k) - len(diag_k1)
        torsion = [d for d in diag_k1 if abs(d) > 1]
        out.append((k, betti, torsion))
    return out


def euler_characteristic(cc: ChainComplex) -> int:
    return int(sum((-1) ** k * len(v) for k, v in cc.generators.items()))
