"""Linearized obstruction sections over broken trajectories, perturbation
sections, and perturbed gluing counts.

For a broken pair (upper, lower) through a middle critical point, the
linearized section pairs the upper trajectory's incoming coefficients with
the lower fiber's coefficients (and vice versa):

    <s0_plus,  eta_plus>  =   sum_{lam_i > 0} cminus_i dplus_i  e^{-4 lam_i T}
    <s0_minus, eta_minus> = - sum_{lam_i < 0} cplus_i  dminus_i e^{+4 lam_i T}

Both sums decay in T.  A compatible perturbation vanishes near T = R and
ramps to the constant transverse choice sigma for large T; zeros of s0 + sigma
are the glued configurations that survive the perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .asymptotics import extract_cokernel_coeffs, extract_trajectory_coeffs
from .errors import NotTransverse, UnstableCount
from .trajectories import IsolatedTrajectory, SampledFamily, shoot, unstable_direction


# -- coefficient bundles ---------------------------------------------------------


@dataclass
class BrokenPair:
    upper: object                  # Trajectory in M(p, m)
    lower: object                  # Trajectory in M(m, r)
    middle: str
    c_minus: object                # upper coefficients at its middle end (modes I+)
    c_plus: object                 # lower coefficients at its middle end (modes I-)
    d_plus: object | None          # lower fiber coefficients at middle (modes I+)
    d_minus: object | None         # upper fiber coefficients at middle (modes I-)

    @property
    def label(self):
        return f"({self.lower.label},{self.upper.label})"


def make_broken_pair(setup, upper, lower, cfg, fibers=None, coeff_cache=None) -> BrokenPair:
    if upper.target != lower.source:
        raise ValueError("pieces do not chain through a common critical point")
    middle = upper.target

    def coeffs(traj, end):
        key = (traj.label, end)
        if coeff_cache is not None and key in coeff_cache:
            return coeff_cache[key]
        out = extract_trajectory_coeffs(setup, traj, end, cfg)
        if coeff_cache is not None:
            coeff_cache[key] = out
        return out

    fibers = fibers or {}
    d_plus = d_minus = None
    if lower.label in fibers:
        d_plus = extract_cokernel_coeffs(setup, fibers[lower.label], "source", cfg)
    if upper.label in fibers:
        d_minus = extract_cokernel_coeffs(setup, fibers[upper.label], "target", cfg)
    return BrokenPair(upper=upper, lower=lower, middle=middle,
                      c_minus=coeffs(upper, "target"), c_plus=coeffs(lower, "source"),
                      d_plus=d_plus, d_minus=d_minus)


# -- the linearized section ------------------------------------------------------


def _paired_terms(c_coeffs, d_coeffs, positive):
    """(coefficient, decay rate) per mode shared by the two bundles."""
    terms = []
    for mc in c_coeffs.allowed_modes():
        md = next((m for m in d_coeffs.allowed_modes() if m.label == mc.label), None)
        if md is None:
            raise ValueError(f"mode {mc.label} unmatched between coefficient bundles")
        lam = mc.eigenvalue
        if positive:
            terms.append((mc.coefficient * md.coefficient, 4.0 * lam))
        else:
            terms.append((-mc.coefficient * md.coefficient, -4.0 * lam))
    return terms       # all rates positive: every term decays


def linearized_obstruction_section(pair: BrokenPair, T):
    """Evaluate (s0_plus per lower-fiber element, s0_minus per upper-fiber element)."""
    T = np.asarray(T, dtype=float)
    s_plus = []
    s_minus = []
    if pair.d_plus is not None:
        terms = _paired_terms(pair.c_minus, pair.d_plus, positive=True)
        s_plus.append(sum(c * np.exp(-r * T) for c, r in terms))
    if pair.d_minus is not None:
        terms = _paired_terms(pair.c_plus, pair.d_minus, positive=False)
        s_minus.append(sum(c * np.exp(-r * T) for c, r in terms))
    return s_plus, s_minus


@dataclass
class SectionComponent:
    pair: BrokenPair
    side: str                      # "+" (lower fiber) or "-" (upper fiber)
    obstructed_label: str          # label of the obstructed piece carrying the fiber
    terms: list                    # [(coefficient, decay rate > 0)]

    def value(self, T):
        T = np.asarray(T, dtype=float)
        return sum(c * np.exp(-r * T) for c, r in self.terms)

    def leading(self):
        return min(self.terms, key=lambda t: t[1]) if self.terms else (0.0, np.inf)

    def bound(self, T):
        rates = min((r for _, r in self.terms), default=np.inf)
        return sum(abs(c) for c, _ in self.terms) * np.exp(-rates * np.asarray(T))


@dataclass
class ObstructionSectionModel:
    pair: BrokenPair
    components: list               # SectionComponent per fiber basis element
    R: float

    @property
    def empty(self):
        return not self.components


def build_section_model(pair: BrokenPair, R) -> ObstructionSectionModel:
    comps = []
    if pair.d_plus is not None:
        comps.append(SectionComponent(pair, "+", pair.lower.label,
                                      _paired_terms(pair.c_minus, pair.d_plus, True)))
    if pair.d_minus is not None:
        comps.append(SectionComponent(pair, "-", pair.upper.label,
                                      _paired_terms(pair.c_plus, pair.d_minus, False)))
    return ObstructionSectionModel(pair=pair, components=comps, R=float(R))


def default_gluing_floor(setup, cfg):
    """Validity floor R: both tails clip_efolds deep inside normal charts."""
    if cfg.gluing_R is not None:
        return cfg.gluing_R
    lam_min = min(c.min_abs_eigenvalue() for c in setup.critical_points)
    return cfg.clip_efolds / lam_min


def default_t_max(setup, cfg, R):
    if cfg.T_max is not None:
        return cfg.T_max
    lam_min = min(c.min_abs_eigenvalue() for c in setup.critical_points)
    return R + cfg.ramp_delta2 + 5.0 / lam_min


# -- perturbation sections -------------------------------------------------------


def _smoothstep(x):
    """C-infinity monotone step: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    a = np.where(x > 0, np.exp(-1.0 / np.maximum(x, 1e-300)), 0.0)
    b = np.where(1 - x > 0, np.exp(-1.0 / np.maximum(1 - x, 1e-300)), 0.0)
    return a / (a + b)


@dataclass
class PerturbationSection:
    """sigma_{+-}(u_+, u_-, T) = ramp(T) * (sigma values on the pieces' fibers)."""

    sigma: dict                    # obstructed component label -> nonzero real
    R: float
    delta1: float
    delta2: float
    c1_bound: float
    sup_value: float = 0.0
    sup_slope: float = 0.0

    def ramp(self, T):
        T = np.asarray(T, dtype=float)
        return _smoothstep((T - self.R - self.delta1) / (self.delta2 - self.delta1))

    def value(self, label, T):
        return self.ramp(T) * self.sigma[label]

    def limit(self, label):
        return self.sigma[label]


def build_perturbation_section(obstructed_labels, sigma_choices, cfg, R) -> PerturbationSection:
    """Assemble the ramped section; reject zero choices; validate the C1 bound."""
    sigma = {}
    for label in obstructed_labels:
        val = sigma_choices.get(label, cfg.sigma_default)
        if val == 0:
            raise NotTransverse(f"sigma choice for {label} is zero")
        sigma[label] = float(val)
    pert = PerturbationSection(sigma=sigma, R=float(R), delta1=cfg.ramp_delta1,
                               delta2=cfg.ramp_delta2, c1_bound=cfg.c1_bound)
    grid = np.linspace(R, R + cfg.ramp_delta2 + 2.0, 4001)
    ramp = pert.ramp(grid)
    slope = np.gradient(ramp, grid)
    smax = max((abs(v) for v in sigma.values()), default=0.0)
    pert.sup_value = float(smax * np.max(ramp))
    pert.sup_slope = float(smax * np.max(np.abs(slope)))
    if pert.sup_value > cfg.c1_bound or pert.sup_slope > cfg.c1_bound:
        raise ValueError(f"perturbation violates the C1 bound {cfg.c1_bound}")
    return pert


# -- zero counting ---------------------------------------------------------------


@dataclass
class GluingZero:
    T: float
    slope_sign: int
    margin_ok: bool


@dataclass
class GluingCount:
    pair_label: str
    component_label: str
    side: str
    zeros: list
    count: int
    predicted: int                 # asymptotic dichotomy
    monotone_tail: bool
    leading_coefficient: float
    sigma_limit: float

    @property
    def agrees(self):
        return self.count == self.predicted


def _find_zeros(fun, grid):
    vals = fun(grid)
    zeros = []
    for i in range(len(grid) - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0.0:
            zeros.append((grid[i], np.sign(b - a)))
        elif a * b < 0:
            lo, hi = grid[i], grid[i + 1]
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if fun(mid) * fun(lo) <= 0:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-12:
                    break
            zeros.append((0.5 * (lo + hi), np.sign(b - a)))
    return zeros


def count_perturbed_gluings(model: ObstructionSectionModel, pert: PerturbationSection,
                            T_max, cfg) -> list:
    """Count sign changes of s0 + sigma on [R, T_max] per fiber component."""
    out = []
    R = model.R
    for comp in model.components:
        sigma_inf = pert.limit(comp.obstructed_label)

        def total(T, comp=comp):
            return comp.value(T) + pert.value(comp.obstructed_label, T)

        grid = np.linspace(R, T_max, cfg.count_grid)
        zeros = _find_zeros(total, grid)
        zeros_fine = _find_zeros(total, np.linspace(R, T_max, 2 * cfg.count_grid))
        if len(zeros) != len(zeros_fine):
            raise UnstableCount(f"zero count unstable for {comp.pair.label}",
                                counts=(len(zeros), len(zeros_fine)))
        lead_c, _ = comp.leading()
        predicted = 1 if np.sign(lead_c) != np.sign(sigma_inf) and lead_c != 0 else 0
        tail = np.linspace(R + 2.0 / _min_rate(comp), T_max, 400)
        vals = np.abs(comp.value(tail))
        monotone = bool(np.all(np.diff(vals) <= 1e-14))
        glue_zeros = []
        scale0 = float(comp.bound(R)) if comp.terms else 0.0
        for T0, slope in zeros:
            corr = (comp.bound(T0) ** 2) / scale0 if scale0 else 0.0
            margin_ok = abs(sigma_inf) >= cfg.margin_factor * corr
            glue_zeros.append(GluingZero(T=float(T0), slope_sign=int(slope),
                                         margin_ok=bool(margin_ok)))
        out.append(GluingCount(pair_label=model.pair.label,
                               component_label=comp.obstructed_label, side=comp.side,
                               zeros=glue_zeros, count=len(glue_zeros),
                               predicted=predicted, monotone_tail=monotone,
                               leading_coefficient=float(lead_c),
                               sigma_limit=float(sigma_inf)))
    return out


def _min_rate(comp):
    return min((r for _, r in comp.terms), default=1.0)


# -- three-level chains (report only) --------------------------------------------


@dataclass
class ChainSectionModel:
    """Direct-sum model over (T1, T2) for a two-neck broken chain."""

    pieces: tuple                  # labels (upper, middle, lower)
    terms_upper_neck: list         # [(coefficient, rate)] paired at the upper neck
    terms_lower_neck: list
    R: float

    def value(self, T1, T2):
        v1 = sum(c * np.exp(-r * np.asarray(T1)) for c, r in self.terms_upper_neck)
        v2 = sum(c * np.exp(-r * np.asarray(T2)) for c, r in self.terms_lower_neck)
        return v1 + v2

    def limit_T1(self, T2):
        """C1-limit as T1 -> infinity: the (middle, lower) pair section."""
        return sum(c * np.exp(-r * np.asarray(T2)) for c, r in self.terms_lower_neck)

    def limit_T2(self, T1):
        return sum(c * np.exp(-r * np.asarray(T1)) for c, r in self.terms_upper_neck)


def build_chain_model(setup, upper, middle_piece, lower, cfg, fibers, R) -> ChainSectionModel:
    """Chain (upper, middle, lower) with the obstruction fiber on the middle piece."""
    pair_top = make_broken_pair(setup, upper, middle_piece, cfg, fibers=fibers)
    pair_bot = make_broken_pair(setup, middle_piece, lower, cfg, fibers=fibers)
    if pair_top.d_plus is None or pair_bot.d_minus is None:
        raise ValueError("chain model expects the obstruction fiber on the middle piece")
    return ChainSectionModel(
        pieces=(upper.label, middle_piece.label, lower.label),
        terms_upper_neck=_paired_terms(pair_top.c_minus, pair_top.d_plus, True),
        terms_lower_neck=_paired_terms(pair_bot.c_plus, pair_bot.d_minus, False),
        R=float(R))


def chain_zero_report(model: ChainSectionModel, T_max, n=160):
    """Sign structure of the chain section over the (T1, T2) box (report only)."""
    ts = np.linspace(model.R, T_max, n)
    vals = model.value(ts[:, None], ts[None, :])
    signs = np.sign(vals)
    has_zero = bool(np.any(signs[:-1, :] * signs[1:, :] <= 0) or
                    np.any(signs[:, :-1] * signs[:, 1:] <= 0))
    diag = np.sign(model.value(ts, ts))
    g4_t1 = float(np.max(np.abs(model.value(T_max * 4, ts) - model.limit_T1(ts))))
    g4_t2 = float(np.max(np.abs(model.value(ts, T_max * 4) - model.limit_T2(ts))))
    return {"pieces": model.pieces, "has_zero_curve": has_zero,
            "diagonal_sign_change": bool(np.any(diag[:-1] * diag[1:] <= 0)),
            "g4_limit_defect_T1": g4_t1, "g4_limit_defect_T2": g4_t2}


# -- family end matching ---------------------------------------------------------


@dataclass
class EndMatchReport:
    source: str
    target: str
    entries: list                  # per family end: dict
    orphan_ends: list
    orphan_zeros: list

    @property
    def all_matched(self):
        return not self.orphan_ends and not self.orphan_zeros


def _match_piece(inventory, source, target, side=None, trajectory=None, merge_tol=1e-3):
    """Find the 0-dim element of M(source, target) by branch side or proximity."""
    cands = inventory.get((source, target), [])
    if trajectory is not None:
        best, dist = None, np.inf
        for t in cands:
            d = trajectory.hausdorff_distance(t)
            if d < dist:
                best, dist = t, d
        return best.label if best is not None and dist < merge_tol else None
    if side is not None:
        for t in cands:
            if t.departure_sign() == side:
                return t.label
    return None


def match_family_ends(setup, family_moduli, inventory, sweep, gluing_counts, cfg,
                      probe_offset=2e-3) -> EndMatchReport:
    """Identify the broken chain each family end converges to and pair it with
    the perturbed gluing inventory."""
    entries = []
    orphan_ends = []
    zero_keys = set()
    for gc in gluing_counts:
        for _ in range(gc.count):
            zero_keys.add(gc.pair_label)
    matched_zero_keys = set()

    for comp in family_moduli.components:
        if not isinstance(comp, SampledFamily):
            continue
        if comp.closed:
            entries.append({"family": comp.trajectories[0].label.rsplit(".", 1)[0],
                            "closed": True, "ends": []})
            continue
        lo, hi = comp.arc
        fam_label = comp.trajectories[0].label.rsplit(".", 1)[0]
        ends = []
        for end_angle, inward in ((lo, +1), (hi, -1)):
            boundary = _nearest_boundary(sweep, end_angle)
            chain = []
            if boundary is not None:
                upper_label = _match_piece(
                    inventory, family_moduli.source, boundary["connects"],
                    trajectory=None if boundary["captured"] != boundary["connects"]
                    else _normalized(setup, boundary, cfg),
                    merge_tol=10 * cfg.merge_tol)
                chain.append((family_moduli.source, boundary["connects"], upper_label))
            probe = shoot(setup, setup.crit(family_moduli.source),
                          unstable_direction(setup.crit(family_moduli.source),
                                             end_angle + inward * probe_offset),
                          cfg, rtol=cfg.sweep_rtol, atol=cfg.sweep_atol, strict=False)
            prev = boundary["connects"] if boundary is not None else None
            for cid, info in sorted(probe.crossings.items(),
                                    key=lambda kv: -setup.crit(kv[0]).f_value):
                if prev is None or setup.crit(cid).f_value >= setup.crit(prev).f_value:
                    continue
                if info["dist"] > 0.8 * setup.normal_radius * 2:
                    continue
                piece = _match_piece(inventory, prev, cid, side=info["side"])
                chain.append((prev, cid, piece))
                prev = cid
            if prev is not None and prev != family_moduli.target:
                piece = _match_piece(inventory, prev, family_moduli.target,
                                     side=_exit_side(probe, setup, prev))
                chain.append((prev, family_moduli.target, piece))
            matched = []
            for gc in gluing_counts:
                if gc.count == 0:
                    continue
                labels = {gc.pair_label.strip("()").split(",")[0],
                          gc.pair_label.strip("()").split(",")[1]}
                chain_labels = {p for _, _, p in chain if p}
                if labels <= chain_labels:
                    matched.append(gc.pair_label)
                    matched_zero_keys.add(gc.pair_label)
            ends.append({"angle": float(end_angle), "chain": chain, "matched": matched})
            if not matched and gluing_counts:
                orphan_ends.append({"family": fam_label, "angle": float(end_angle),
                                    "chain": chain})
        entries.append({"family": fam_label, "closed": False, "ends": ends})
    orphan_zeros = sorted(zero_keys - matched_zero_keys)
    return EndMatchReport(source=family_moduli.source, target=family_moduli.target,
                          entries=entries, orphan_ends=orphan_ends,
                          orphan_zeros=orphan_zeros)


def _nearest_boundary(sweep, angle):
    best, dist = None, np.inf
    for b in sweep.boundaries:
        d = abs((b.get("arc_angle", b["angle"]) - angle + np.pi) % (2 * np.pi) - np.pi)
        if d < dist:
            best, dist = b, d
    return best if dist < 1e-3 else None


def _normalized(setup, boundary, cfg):
    from .trajectories import normalize_representative
    eps = cfg.eps_factor * float(np.min(setup.critical_value_gaps()))
    return normalize_representative(setup, boundary["curve"], eps, cfg)


def _exit_side(probe, setup, cid):
    crit = setup.crit(cid)
    info = probe.crossings.get(cid)
    return info["side"] if info else None
