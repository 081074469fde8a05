"""Gradient-flow shooting, moduli-space enumeration and the representative gauge.

Trajectories are found by shooting from the unstable sphere of a critical
point.  Directions are classified by a side signature: at every intermediate
critical level the flow crosses, the sign of the crossing point against the
saddle's unstable axis.  Genuine signature boundaries (the crossing point
converges onto the saddle) isolate 0-dimensional moduli by bisection; flips
whose crossing stays far from the saddle are projection artifacts and only
mean the family continues through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial import cKDTree

from .errors import EpsilonTooLarge, NoCapture, OutOfAtlas
from .geometry import CriticalPoint, MorseSetup


@dataclass
class Segment:
    patch: int
    sol: object          # scipy dense OdeSolution
    s0: float
    s1: float


@dataclass
class FlowCurve:
    setup: MorseSetup
    source: str
    direction: np.ndarray          # coefficients in the unstable eigenframe
    angle: float | None
    segments: list[Segment]
    terminal: str                  # "captured" | "escaped"
    captured_by: str | None
    s_end: float
    signature: tuple = ()
    crossings: dict = field(default_factory=dict)

    def eval_chart(self, s):
        for seg in self.segments:
            if s <= seg.s1 or seg is self.segments[-1]:
                if s >= seg.s0 - 1e-12:
                    return seg.patch, seg.sol(min(max(s, seg.s0), seg.s1))
        raise ValueError(f"s={s} outside curve range")

    def eval_ambient(self, s):
        patch, x = self.eval_chart(s)
        emb = self.setup.patches[patch].scalar_embed(x)
        return emb if emb is not None else self.setup.embed(patch, x)

    def f_at(self, s):
        return float(self.setup.f_ambient(self.eval_ambient(s)))


def unstable_direction(crit: CriticalPoint, angle):
    """Unit vector in the unstable eigenspace, as eigenframe coefficients."""
    k = crit.morse_index
    if k == 1:
        return np.array([np.cos(angle)])     # +1 or -1
    coeffs = np.zeros(k)
    coeffs[0] = np.cos(angle)
    coeffs[1] = np.sin(angle)
    return coeffs


def shoot(setup: MorseSetup, crit: CriticalPoint, direction, cfg, horizon=None,
          rtol=None, atol=None, strict=True) -> FlowCurve:
    """Integrate du/ds = -grad f from a small offset along an unstable direction."""
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (crit.morse_index,):
        raise ValueError("direction must live in the unstable eigenspace")
    direction = direction / np.linalg.norm(direction)
    horizon = horizon if horizon is not None else cfg.horizon
    rtol = rtol if rtol is not None else cfg.rtol
    atol = atol if atol is not None else cfg.atol

    delta = cfg.shoot_offset_factor * setup.normal_radius
    chart_dir = crit.eigvecs_chart[:, : crit.morse_index] @ direction
    patch = crit.patch
    x = crit.coords + delta * chart_dir

    cap_r = cfg.capture_factor * setup.normal_radius
    targets = [c for c in setup.critical_points if c.f_value < crit.f_value - 1e-9]
    h_axis = setup.height_axis

    segments = []
    s_now = 0.0
    captured = None
    while s_now < horizon:
        p = setup.patches[patch]
        switch_margin = 0.05 * float(np.min(p.hi - p.lo))
        fast = p.scalar_grad(x, h_axis) is not None

        if fast:
            def rhs(_, y, p=p):
                return -p.scalar_grad(y, h_axis)

            def pos(y, p=p):
                return p.scalar_embed(y)
        else:
            def rhs(_, y, patch=patch):
                return -setup.grad(patch, y)

            def pos(y, patch=patch):
                return setup.embed(patch, y)

        def margin_event(_, y, p=p, m=switch_margin):
            return p.boundary_margin(y) - m
        margin_event.terminal = True
        margin_event.direction = -1

        events = [margin_event]
        for c in targets:
            def cap_event(_, y, c=c):
                d = pos(y) - c.ambient
                return float(d @ d) - cap_r * cap_r
            cap_event.terminal = True
            cap_event.direction = -1
            events.append(cap_event)

        sol = solve_ivp(rhs, (s_now, horizon), x, method="DOP853", dense_output=True,
                        rtol=rtol, atol=atol, events=events)
        if not sol.success:
            raise RuntimeError(f"flow integration failed: {sol.message}")
        s_stop = float(sol.t[-1])
        segments.append(Segment(patch, sol.sol, s_now, s_stop))
        hit = [i for i, te in enumerate(sol.t_events) if len(te)]
        if hit and hit == [0]:
            # left the patch: switch charts and continue
            ambient = pos(sol.y[:, -1])
            try:
                patch, x = setup.locate(ambient, prefer=None)
            except OutOfAtlas:
                return _finish_curve(setup, crit, direction, segments, "escaped", None,
                                     s_stop, cfg)
            s_now = s_stop
            continue
        if hit:
            cap_idx = [i for i in hit if i > 0][0]
            captured = targets[cap_idx - 1].id
        break

    if captured is None:
        curve = _finish_curve(setup, crit, direction, segments, "escaped", None,
                              float(segments[-1].s1), cfg)
        if strict:
            raise NoCapture(f"horizon {horizon} exceeded shooting from {crit.id}",
                            last_point=curve.eval_ambient(curve.s_end))
        return curve
    return _finish_curve(setup, crit, direction, segments, "captured", captured,
                         float(segments[-1].s1), cfg)


def _finish_curve(setup, crit, direction, segments, terminal, captured_by, s_end, cfg):
    curve = FlowCurve(setup=setup, source=crit.id, direction=direction, angle=None,
                      segments=segments, terminal=terminal, captured_by=captured_by,
                      s_end=s_end)
    curve.signature, curve.crossings = _side_signature(curve, cfg)
    return curve


class _ReversedSol:
    """Dense segment of a backward integration, read in forward time."""

    def __init__(self, sol, total):
        self.sol = sol
        self.total = total

    def __call__(self, s):
        return self.sol(self.total - s)


def backward_shoot(setup: MorseSetup, crit: CriticalPoint, branch, cfg,
                   horizon=None, rtol=None, atol=None) -> FlowCurve:
    """Integrate du/ds = +grad f backward from a stable-sphere direction.

    Robust way to land 0-dimensional moduli whose forward directions cluster
    on the slow-mode caustic of the source.  The result is returned in forward
    orientation: a flow line from whatever maximum the backward flow reaches,
    down to ``crit``.
    """
    k_st = setup.dim - crit.morse_index
    branch = np.asarray(branch, dtype=float)
    if branch.shape != (k_st,):
        raise ValueError("branch must live in the stable eigenspace")
    branch = branch / np.linalg.norm(branch)
    horizon = horizon if horizon is not None else cfg.horizon
    rtol = rtol if rtol is not None else cfg.rtol
    atol = atol if atol is not None else cfg.atol

    delta = cfg.shoot_offset_factor * setup.normal_radius
    chart_dir = crit.eigvecs_chart[:, crit.morse_index:] @ branch
    patch = crit.patch
    x = crit.coords + delta * chart_dir

    cap_r = cfg.capture_factor * setup.normal_radius
    targets = [c for c in setup.critical_points if c.f_value > crit.f_value + 1e-9]
    h_axis = setup.height_axis

    segments = []
    s_now = 0.0
    reached = None
    while s_now < horizon:
        p = setup.patches[patch]
        switch_margin = 0.05 * float(np.min(p.hi - p.lo))
        fast = p.scalar_grad(x, h_axis) is not None
        if fast:
            def rhs(_, y, p=p):
                return p.scalar_grad(y, h_axis)

            def pos(y, p=p):
                return p.scalar_embed(y)
        else:
            def rhs(_, y, patch=patch):
                return setup.grad(patch, y)

            def pos(y, patch=patch):
                return setup.embed(patch, y)

        def margin_event(_, y, p=p, m=switch_margin):
            return p.boundary_margin(y) - m
        margin_event.terminal = True
        margin_event.direction = -1
        events = [margin_event]
        for c in targets:
            def cap_event(_, y, c=c):
                d = pos(y) - c.ambient
                return float(d @ d) - cap_r * cap_r
            cap_event.terminal = True
            cap_event.direction = -1
            events.append(cap_event)

        sol = solve_ivp(rhs, (s_now, horizon), x, method="DOP853", dense_output=True,
                        rtol=rtol, atol=atol, events=events)
        if not sol.success:
            raise RuntimeError(f"backward flow integration failed: {sol.message}")
        s_stop = float(sol.t[-1])
        segments.append(Segment(patch, sol.sol, s_now, s_stop))
        hit = [i for i, te in enumerate(sol.t_events) if len(te)]
        if hit and hit == [0]:
            ambient = pos(sol.y[:, -1])
            try:
                patch, x = setup.locate(ambient, prefer=None)
            except OutOfAtlas:
                break
            s_now = s_stop
            continue
        if hit:
            reached = targets[[i for i in hit if i > 0][0] - 1].id
        break

    total = float(segments[-1].s1)
    fwd_segments = [Segment(seg.patch, _ReversedSol(seg.sol, total),
                            total - seg.s1, total - seg.s0)
                    for seg in reversed(segments)]
    if reached is None:
        curve = FlowCurve(setup=setup, source=crit.id, direction=branch, angle=None,
                          segments=fwd_segments, terminal="escaped", captured_by=None,
                          s_end=total)
        curve.signature = (("capture", "none"),)
        return curve
    curve = FlowCurve(setup=setup, source=reached, direction=branch, angle=None,
                      segments=fwd_segments, terminal="captured", captured_by=crit.id,
                      s_end=total)
    curve.signature, curve.crossings = _side_signature(curve, cfg)
    return curve


def _side_signature(curve: FlowCurve, cfg):
    """Signs of level crossings against each intermediate saddle's unstable axis."""
    setup = curve.setup
    f_hi = setup.crit(curve.source).f_value
    f_lo = curve.f_at(curve.s_end)
    sig = []
    crossings = {}
    for c in setup.critical_points:
        if not (f_lo + 1e-9 < c.f_value < f_hi - 1e-9):
            continue
        if curve.captured_by == c.id:
            continue
        a, b = curve.segments[0].s0, curve.s_end
        fun = lambda s: curve.f_at(s) - c.f_value
        if fun(a) * fun(b) > 0:
            continue
        s_cross = brentq(fun, a, b, xtol=1e-12)
        delta = curve.eval_ambient(s_cross) - c.ambient
        w = c.eigvecs_ambient[:, 0]
        proj = float(delta @ w)
        dist = float(np.linalg.norm(delta))
        side = 1 if proj >= 0 else -1
        sig.append((c.id, side))
        crossings[c.id] = {"s": float(s_cross), "dist": dist, "proj": proj, "side": side}
    sig.append(("capture", curve.captured_by if curve.captured_by else "none"))
    return tuple(sig), crossings


# -- trajectories and the representative gauge ---------------------------------


@dataclass
class Trajectory:
    setup: MorseSetup
    source: str
    target: str
    label: str
    eps: float
    l_minus: float
    l_plus: float
    s: np.ndarray
    patches: np.ndarray
    coords: np.ndarray
    ambient: np.ndarray
    velocity: np.ndarray            # ambient du/ds = -grad f
    curve: FlowCurve
    s_offset: float                 # curve parameter = s + s_offset
    angle: float | None = None
    flow_residual: float = 0.0

    @property
    def signature(self):
        return self.curve.signature

    def f_values(self):
        return self.ambient @ self.setup.height_axis

    def eval_chart(self, s):
        return self.curve.eval_chart(s + self.s_offset)

    def eval_ambient(self, s):
        return self.curve.eval_ambient(s + self.s_offset)

    def resample(self, ds):
        """Fresh uniform sampling of the same normalized representative."""
        return _sample_arrays(self, self.s[0], self.s[-1], ds)

    def departure_sign(self):
        """Side of the fastest unstable axis the trajectory leaves the source on."""
        crit = self.setup.crit(self.source)
        w = crit.eigvecs_ambient[:, 0]
        k = min(len(self.s) - 1, 5)
        return 1 if float((self.ambient[k] - crit.ambient) @ w) >= 0 else -1

    def arrival_sign(self):
        """Sign of the leading stable coefficient at the target."""
        crit = self.setup.crit(self.target)
        w = crit.eigvecs_ambient[:, crit.morse_index]
        return 1 if float((self.ambient[-5] - crit.ambient) @ w) >= 0 else -1

    def energy_defect(self):
        """| f drop - integral of |grad|^2 | over the stored samples."""
        speed2 = np.einsum("ij,ij->i", self.velocity, self.velocity)
        integral = float(simpson(speed2, x=self.s))
        drop = float(self.f_values()[0] - self.f_values()[-1])
        return abs(drop - integral)

    def hausdorff_distance(self, other: "Trajectory"):
        ta = cKDTree(self.ambient)
        tb = cKDTree(other.ambient)
        d_ab = np.max(tb.query(self.ambient)[0])
        d_ba = np.max(ta.query(other.ambient)[0])
        return float(max(d_ab, d_ba))

    def normal_tail(self, end):
        """Tail samples inside the end's normal chart, in normal coordinates.

        Returns (s values, xi array); ``end`` is "source" or "target".
        Samples stored in an overlapping patch are converted into the critical
        point's host patch first.
        """
        cid = self.source if end == "source" else self.target
        chart = self.setup.normal_charts[cid]
        crit = chart.crit
        host = self.setup.patches[crit.patch]
        near = np.linalg.norm(self.ambient - crit.ambient, axis=1) <= 2.0 * chart.radius
        coords = np.full_like(self.coords, np.nan)
        same = near & (self.patches == crit.patch)
        coords[same] = self.coords[same]
        for i in np.nonzero(near & ~same)[0]:
            c = host.invert(self.ambient[i])
            if c is not None:
                coords[i] = c
        xi = chart.to_normal(coords - crit.coords)
        with np.errstate(invalid="ignore"):
            inside = near & (np.linalg.norm(xi, axis=1) <= chart.radius)
        return self.s[inside], xi[inside]


def _sample_arrays(traj_or_curve, s_lo, s_hi, ds, s_offset=0.0):
    if isinstance(traj_or_curve, Trajectory):
        curve = traj_or_curve.curve
        s_offset = traj_or_curve.s_offset
    else:
        curve = traj_or_curve
    n = int(np.floor((s_hi - s_lo) / ds + 1e-9))
    s = s_lo + np.arange(n + 1) * ds
    setup = curve.setup
    patches = np.empty(len(s), dtype=int)
    coords = np.empty((len(s), setup.dim))
    for i, si in enumerate(s):
        patches[i], coords[i] = curve.eval_chart(si + s_offset)
    ambient = np.empty((len(s), setup.ambient_dim))
    velocity = np.empty_like(ambient)
    for pidx in np.unique(patches):
        m = patches == pidx
        ambient[m] = setup.embed(pidx, coords[m])
        velocity[m] = -setup.grad_ambient(pidx, coords[m])
    return s, patches, coords, ambient, velocity


def normalize_representative(setup: MorseSetup, curve_or_traj, eps, cfg,
                             label=None, angle=None) -> Trajectory:
    """Unique representative: f(u(-l)) = f(p) - eps and f(u(l)) = f(q) + eps."""
    gaps = setup.critical_value_gaps()
    if eps >= float(np.min(gaps)):
        raise EpsilonTooLarge(f"eps={eps} is not below the smallest critical gap "
                              f"{np.min(gaps)}")
    curve = curve_or_traj.curve if isinstance(curve_or_traj, Trajectory) else curve_or_traj
    if curve.terminal != "captured":
        raise ValueError("cannot normalize a non-captured flow curve")
    source, target = curve.source, curve.captured_by
    f_p = setup.crit(source).f_value
    f_q = setup.crit(target).f_value

    s_hi = brentq(lambda s: curve.f_at(s) - (f_p - eps), curve.segments[0].s0,
                  curve.s_end, xtol=1e-13)
    s_lo = brentq(lambda s: curve.f_at(s) - (f_q + eps), curve.segments[0].s0,
                  curve.s_end, xtol=1e-13)
    center = 0.5 * (s_hi + s_lo)
    ell = 0.5 * (s_lo - s_hi)

    ds = cfg.ds
    grid_lo = np.ceil((curve.segments[0].s0 - center) / ds) * ds
    grid_hi = np.floor((curve.s_end - center) / ds) * ds
    s, patches, coords, ambient, velocity = _sample_arrays(curve, grid_lo, grid_hi, ds,
                                                           s_offset=center)
    traj = Trajectory(setup=setup, source=source, target=target,
                      label=label or f"{source}->{target}", eps=float(eps),
                      l_minus=float(ell), l_plus=float(ell),
                      s=s, patches=patches, coords=coords, ambient=ambient,
                      velocity=velocity, curve=curve, s_offset=center, angle=angle)
    traj.flow_residual = _flow_defect(traj)
    return traj


def _flow_defect(traj: Trajectory):
    """Max Hermite defect of the stored samples against du/ds = -grad f."""
    s, amb, vel = traj.s, traj.ambient, traj.velocity
    h = s[1] - s[0]
    lhs = (amb[2:] - amb[:-2]) / (2 * h)
    acc = np.gradient(np.gradient(vel, h, axis=0), h, axis=0)
    rhs = vel[1:-1] + (h ** 2 / 6.0) * acc[1:-1]
    return float(np.max(np.linalg.norm(lhs - rhs, axis=1)))


# -- moduli spaces --------------------------------------------------------------


@dataclass
class IsolatedTrajectory:
    trajectory: Trajectory
    angle: float | None
    cut_status: str = "unresolved"
    dims: tuple | None = None       # (dim_ker, dim_coker)


@dataclass
class SampledFamily:
    trajectories: list
    angles: list
    closed: bool
    arc: tuple | None = None        # (angle_lo, angle_hi) delimited by boundaries
    cut_status: str = "unresolved"
    dims: tuple | None = None
    end_info: list = field(default_factory=list)   # filled by the end matcher


@dataclass
class ModuliSpace:
    source: str
    target: str
    expected_dim: int
    components: list
    near_breaking: list = field(default_factory=list)

    def count_isolated(self):
        return sum(1 for c in self.components if isinstance(c, IsolatedTrajectory))

    def families(self):
        return [c for c in self.components if isinstance(c, SampledFamily)]

    def trajectories(self):
        out = []
        for c in self.components:
            if isinstance(c, IsolatedTrajectory):
                out.append(c.trajectory)
            else:
                out.extend(c.trajectories)
        return out

    def is_empty(self):
        return not self.components


class SourceSweep:
    """Shared classification sweep over the unstable sphere of one source."""

    def __init__(self, setup, crit, cfg):
        self.setup = setup
        self.crit = crit
        self.cfg = cfg
        self._cache = {}
        if crit.morse_index == 1:
            self.angles = np.array([0.0, np.pi])
            self.signatures = [self.classify(a) for a in self.angles]
            self.boundaries = []
        else:
            self.angles = np.linspace(0.0, 2 * np.pi, cfg.sweep_count, endpoint=False)
            self.signatures = [self.classify(a) for a in self.angles]
            self.boundaries = self._find_boundaries()

    def _shoot(self, angle, rtol, atol):
        key = (round(float(angle), 15), rtol)
        if key not in self._cache:
            curve = shoot(self.setup, self.crit, unstable_direction(self.crit, angle),
                          self.cfg, rtol=rtol, atol=atol, strict=False)
            curve.angle = float(angle)
            self._cache[key] = curve
        return self._cache[key]

    def classify(self, angle, tight=False):
        cfg = self.cfg
        rtol, atol = (cfg.rtol, cfg.atol) if tight else (cfg.sweep_rtol, cfg.sweep_atol)
        return self._shoot(angle, rtol, atol).signature

    def curve_at(self, angle):
        return self._shoot(angle % (2 * np.pi), self.cfg.rtol, self.cfg.atol)

    def _find_boundaries(self):
        raw = []
        n = len(self.angles)
        for i in range(n):
            a = self.angles[i]
            b = self.angles[(i + 1) % n] + (2 * np.pi if i == n - 1 else 0.0)
            sa, sb = self.signatures[i], self.signatures[(i + 1) % n]
            if sa != sb:
                raw.extend(self._bisect(a, b, sa, sb))
        return self._classify_boundaries(raw)

    def _bisect(self, a, b, sa, sb, depth=0):
        cfg = self.cfg
        while b - a > cfg.bisect_tol:
            mid = 0.5 * (a + b)
            sm = self.classify(mid, tight=(b - a) < 1e-4)
            if sm == sa:
                a = mid
            elif sm == sb:
                b = mid
            else:
                if depth > 4:
                    break
                return (self._bisect(a, mid, sa, sm, depth + 1)
                        + self._bisect(mid, b, sm, sb, depth + 1))
        return [{"angle": 0.5 * (a + b), "sig_lo": sa, "sig_hi": sb}]

    def _classify_boundaries(self, raw):
        """Cluster bisected flips, identify the saddle each connects to, refine.

        A flip is genuine when the evidence (captures and close level crossings
        seen around it) names a saddle; otherwise it is a projection artifact
        and the family just continues through.
        """
        setup = self.setup
        clusters = []
        for b in sorted(raw, key=lambda d: d["angle"] % (2 * np.pi)):
            angle = b["angle"] % (2 * np.pi)
            for cl in clusters:
                if _angle_dist(angle, cl[0]["angle"] % (2 * np.pi)) < 1e-5:
                    cl.append(b)
                    break
            else:
                clusters.append([b])
        if len(clusters) > 1 and _angle_dist(clusters[0][0]["angle"],
                                             clusters[-1][0]["angle"]) < 1e-5:
            clusters[0].extend(clusters.pop())

        genuine_tol = 0.01 * setup.normal_radius
        out = []
        for cl in clusters:
            angle = cl[0]["angle"] % (2 * np.pi)
            curve = self.curve_at(angle)
            cands = set()
            if curve.captured_by:
                cands.add(curve.captured_by)
            for member in cl:
                for sig in (member["sig_lo"], member["sig_hi"]):
                    cands.add(dict(sig)["capture"])
            for cid, info in curve.crossings.items():
                if info["dist"] < genuine_tol:
                    cands.add(cid)
            saddles = [c for c in cands if c not in ("none", None)
                       and setup.crit(c).morse_index >= 1]
            if not saddles:
                continue            # artifact: crossing stays far from every saddle
            for connects in sorted(saddles, key=lambda c: -setup.crit(c).f_value):
                refined = self._refine_connection(angle, connects)
                close = refined.captured_by == connects or \
                    refined.crossings.get(connects, {}).get("dist", np.inf) < genuine_tol
                if not close:
                    continue
                out.append({"angle": refined.angle if refined.angle is not None else angle,
                            "arc_angle": angle,
                            "sig_lo": cl[0]["sig_lo"], "sig_hi": cl[-1]["sig_hi"],
                            "captured": refined.captured_by, "connects": connects,
                            "curve": refined})
        return out

    def _refine_connection(self, angle, cid):
        """Sharpen a boundary angle by minimizing the crossing distance to ``cid``."""
        best = self.curve_at(angle)
        if best.captured_by == cid:
            return best

        def dist_at(a):
            cv = self.curve_at(a)
            if cv.captured_by == cid:
                return 0.0
            return cv.crossings.get(cid, {}).get("dist", np.inf)

        res = minimize_scalar(dist_at, bounds=(angle - 3e-5, angle + 3e-5),
                              method="bounded", options={"xatol": 1e-14})
        refined = self.curve_at(float(res.x))
        if refined.captured_by == cid:
            return refined
        return refined if dist_at(float(res.x)) < dist_at(angle) else best


def _angle_dist(a, b):
    d = abs(a - b) % (2 * np.pi)
    return min(d, 2 * np.pi - d)


def _flipped_crits(sig_a, sig_b):
    da, db = dict(sig_a), dict(sig_b)
    return [k for k in da if k != "capture" and k in db and da[k] != db[k]]


def _captures_differ(sig_a, sig_b):
    return dict(sig_a)["capture"] != dict(sig_b)["capture"]


def find_moduli(setup: MorseSetup, source: str, target: str, cfg,
                sweep: SourceSweep | None = None, eps=None) -> ModuliSpace:
    """Enumerate the moduli space of flow lines from ``source`` to ``target``."""
    p, q = setup.crit(source), setup.crit(target)
    if not p.f_value > q.f_value:
        raise ValueError("find_moduli requires f(source) > f(target)")
    eps = eps if eps is not None else cfg.eps_factor * float(np.min(setup.critical_value_gaps()))
    expected = p.morse_index - q.morse_index - 1
    moduli = ModuliSpace(source=source, target=target, expected_dim=expected, components=[])
    graze_tol = 0.02 * setup.normal_radius

    def intermediate(cid):
        return q.f_value + 1e-9 < setup.crit(cid).f_value < p.f_value - 1e-9

    if p.morse_index == 1:
        sweep = sweep or SourceSweep(setup, p, cfg)
        for k, angle in enumerate(sweep.angles):
            curve = sweep.curve_at(angle)
            graze = _graze_of(curve, target, graze_tol)
            if curve.captured_by == target and graze is None:
                traj = normalize_representative(setup, curve, eps, cfg,
                                                label=f"{source}->{target}#{k}", angle=angle)
                moduli.components.append(IsolatedTrajectory(traj, float(angle)))
            elif curve.captured_by == target:
                moduli.near_breaking.append({"angle": float(angle), "grazes": graze,
                                             "signature": curve.signature})
            elif curve.captured_by and intermediate(curve.captured_by):
                moduli.near_breaking.append({"angle": float(angle),
                                             "grazes": curve.captured_by,
                                             "signature": curve.signature})
        _dedupe(moduli, cfg)
        return moduli

    if q.morse_index == setup.dim - 1 and expected == 0:
        # aim at the saddle from behind: backward branches off its stable sphere
        for k, angle in enumerate((0.0, np.pi)):
            branch = np.zeros(setup.dim - q.morse_index)
            branch[0] = np.cos(angle)
            curve = backward_shoot(setup, q, branch, cfg)
            if curve.terminal != "captured":
                continue
            graze = _graze_of(curve, target, graze_tol)
            if curve.source == source and graze is None:
                traj = normalize_representative(setup, curve, eps, cfg,
                                                label=f"{source}->{target}#{k}", angle=angle)
                moduli.components.append(IsolatedTrajectory(traj, float(angle)))
            elif curve.source == source or intermediate(curve.source):
                moduli.near_breaking.append({"angle": float(angle),
                                             "grazes": graze or curve.source,
                                             "signature": curve.signature})
        _dedupe(moduli, cfg)
        return moduli

    # index >= 2 source: candidates sit at genuine signature boundaries
    sweep = sweep or SourceSweep(setup, p, cfg)
    for b in sweep.boundaries:
        if b["connects"] == target:
            graze = _graze_of(b["curve"], target, graze_tol)
            if b["captured"] == target and graze is None and expected == 0:
                traj = normalize_representative(setup, b["curve"], eps, cfg,
                                                label=f"{source}->{target}", angle=b["angle"])
                moduli.components.append(IsolatedTrajectory(traj, b["angle"]))
            else:
                moduli.near_breaking.append({"angle": float(b["angle"]), "grazes": graze,
                                             "captured": b["captured"],
                                             "sig_lo": b["sig_lo"], "sig_hi": b["sig_hi"]})
        elif intermediate(b["connects"]):
            moduli.near_breaking.append({"angle": float(b["angle"]),
                                         "grazes": b["connects"],
                                         "sig_lo": b["sig_lo"], "sig_hi": b["sig_hi"]})
    moduli.components.sort(key=lambda c: c.angle)
    for k, comp in enumerate(list(moduli.components)):
        comp.trajectory.label = f"{source}->{target}#{k}"

    if expected >= 1:
        _collect_families(setup, sweep, moduli, target, eps, cfg)
    _dedupe(moduli, cfg)
    return moduli


def _graze_of(curve, target, graze_tol):
    """Id of an intermediate critical point the curve passes too close to."""
    for cid, info in curve.crossings.items():
        if cid != target and info["dist"] < graze_tol:
            return cid
    return None


def _collect_families(setup, sweep, moduli, target, eps, cfg):
    angles = sweep.angles
    captures = [dict(sig)["capture"] for sig in sweep.signatures]
    bounds = sorted({round(b.get("arc_angle", b["angle"]), 8) for b in sweep.boundaries})
    if not bounds:
        if all(c == target for c in captures):
            picks = np.linspace(0, 2 * np.pi, cfg.family_samples, endpoint=False)
            trajs = [normalize_representative(setup, sweep.curve_at(a), eps, cfg,
                                              label=f"{moduli.source}->{target}~loop.{i}",
                                              angle=float(a))
                     for i, a in enumerate(picks)]
            moduli.components.append(SampledFamily(trajs, [float(a) for a in picks],
                                                   closed=True, arc=(0.0, 2 * np.pi)))
        return
    for ai, lo in enumerate(bounds):
        hi = bounds[(ai + 1) % len(bounds)] + (2 * np.pi if ai == len(bounds) - 1 else 0.0)
        inside = [a for a in angles if lo < a < hi or lo < a + 2 * np.pi < hi]
        if not inside:
            continue
        if dict(sweep.classify(inside[len(inside) // 2]))["capture"] != target:
            continue
        span = hi - lo
        pad = max(0.02 * span, 1e-4)
        n_samples = min(cfg.family_samples, max(4, len(inside)))
        picks = np.linspace(lo + pad, hi - pad, n_samples)
        trajs = [normalize_representative(setup, sweep.curve_at(a), eps, cfg,
                                          label=f"{moduli.source}->{target}~fam{ai}.{i}",
                                          angle=float(a % (2 * np.pi)))
                 for i, a in enumerate(picks)]
        moduli.components.append(SampledFamily(trajs, [float(a % (2 * np.pi)) for a in picks],
                                               closed=False, arc=(float(lo), float(hi))))


def _dedupe(moduli: ModuliSpace, cfg):
    isolated = [c for c in moduli.components if isinstance(c, IsolatedTrajectory)]
    keep = []
    for comp in isolated:
        if any(comp.trajectory.hausdorff_distance(k.trajectory) < cfg.merge_tol for k in keep):
            continue
        keep.append(comp)
    moduli.components = keep + [c for c in moduli.components
                                if not isinstance(c, IsolatedTrajectory)]
