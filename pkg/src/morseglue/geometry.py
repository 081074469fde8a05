"""Morse datum (M, f, g): atlas evaluation, critical-point catalog, normal charts.

The height function is always the ambient pairing with a fixed axis; the
metric is induced from the embedding.  All tensor evaluation is batched over
a leading sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ChartRadiusTooLarge, OutOfAtlas, UnknownSetup
from .surfaces import GenusTwoSurface, MongePatch, Patch, StereographicPatch, TorusPatch, _rot_x

BUILTIN_NAMES = ("round_sphere", "upright_torus", "tilted_torus", "upright_genus2")

_DEFAULT_NORMAL_RADIUS = {
    "round_sphere": 0.25,
    "upright_torus": 0.3,
    "tilted_torus": 0.3,
    "upright_genus2": 0.06,
}

_EULER = {"round_sphere": 2, "upright_torus": 0, "tilted_torus": 0, "upright_genus2": -2}


@dataclass
class CriticalPoint:
    id: str
    patch: int
    coords: np.ndarray            # chart coordinates
    ambient: np.ndarray
    f_value: float
    morse_index: int
    eigenvalues: np.ndarray       # ascending, negatives first, no zeros
    eigvecs_chart: np.ndarray     # columns, orthonormal in the metric at p
    eigvecs_ambient: np.ndarray   # columns, orthonormal in R^3

    def unstable_ambient(self):
        """Ambient eigenvectors of the negative eigenvalues (ascending order)."""
        return self.eigvecs_ambient[:, : self.morse_index]

    def min_abs_eigenvalue(self):
        return float(np.min(np.abs(self.eigenvalues)))


@dataclass
class NormalChart:
    """Second-order normal-form coordinates around a critical point.

    Linear eigenframe coordinates xi with f = f(p) + sum(lambda_i xi_i^2)/2
    and metric = identity, both up to the measured residuals.
    """

    crit: CriticalPoint
    radius: float
    residual: float               # max |f - quadratic model| on the chart
    metric_residual: float        # max ||g - I|| on the chart
    _to_normal: np.ndarray = field(repr=False, default=None)

    def to_normal(self, chart_delta):
        return chart_delta @ self._to_normal.T

    def from_normal(self, xi):
        return self.crit.coords + xi @ self.crit.eigvecs_chart.T

    def model_f(self, xi):
        xi = np.asarray(xi)
        return self.crit.f_value + 0.5 * np.sum(self.crit.eigenvalues * xi * xi, axis=-1)


class MorseSetup:
    """A surface patchwork with height function, induced metric and catalog."""

    def __init__(self, name, patches, height_axis, normal_radius):
        self.name = name
        self.patches: list[Patch] = list(patches)
        self.dim = self.patches[0].dim
        self.ambient_dim = self.patches[0].ambient_dim
        self.height_axis = np.asarray(height_axis, dtype=float)
        self.normal_radius = float(normal_radius)
        self.critical_points: list[CriticalPoint] = []
        self.normal_charts: dict[str, NormalChart] = {}

    # -- pointwise evaluation ------------------------------------------------

    def embed(self, patch, x):
        return self.patches[patch].embed(np.asarray(x, dtype=float))

    def f(self, patch, x):
        return self.embed(patch, x) @ self.height_axis

    def f_ambient(self, ambient):
        return np.asarray(ambient) @ self.height_axis

    def metric(self, patch, x):
        jac = self.patches[patch].jacobian(np.asarray(x, dtype=float))
        return np.einsum("...ai,...aj->...ij", jac, jac)

    def df(self, patch, x):
        jac = self.patches[patch].jacobian(np.asarray(x, dtype=float))
        return np.einsum("...ai,a->...i", jac, self.height_axis)

    def grad(self, patch, x):
        """Gradient in chart components, g^{-1} df."""
        g = self.metric(patch, x)
        df = self.df(patch, x)
        return np.linalg.solve(g, df[..., None])[..., 0]

    def grad_ambient(self, patch, x):
        jac = self.patches[patch].jacobian(np.asarray(x, dtype=float))
        return np.einsum("...ai,...i->...a", jac, self.grad(patch, x))

    def grad_norm(self, patch, x):
        """Metric norm of the gradient (equals the ambient norm of its pushforward)."""
        return np.sqrt(np.einsum("...i,...i->...", self.df(patch, x), self.grad(patch, x)))

    def christoffel(self, patch, x):
        """Gamma^k_{ij}, shape (..., dim, dim, dim) indexed [k, i, j]."""
        p = self.patches[patch]
        x = np.asarray(x, dtype=float)
        jac = p.jacobian(x)                      # (..., amb, dim)
        sec = p.second_derivs(x)                 # (..., dim, dim, amb)
        # d g_{jk} / dx_i = sec_{ij} . jac_k + jac_j . sec_{ik}
        dg = np.einsum("...ija,...ak->...ijk", sec, jac) + np.einsum("...aj,...ika->...ijk", jac, sec)
        g = np.einsum("...ai,...aj->...ij", jac, jac)
        ginv = np.linalg.inv(g)
        # Gamma^k_{ij} = 1/2 g^{kl} (dg_{i jl} + dg_{j il} - dg_{l ij})
        term = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
        return 0.5 * np.einsum("...kl,...ijl->...kij", ginv, term)

    def hessian_operator(self, patch, x):
        """Covariant Hessian of f as a (1,1)-tensor in chart coordinates."""
        p = self.patches[patch]
        x = np.asarray(x, dtype=float)
        jac = p.jacobian(x)
        sec = p.second_derivs(x)
        g = np.einsum("...ai,...aj->...ij", jac, jac)
        ginv = np.linalg.inv(g)
        df = np.einsum("...ai,a->...i", jac, self.height_axis)
        coord_hess = np.einsum("...ija,a->...ij", sec, self.height_axis)
        dg = np.einsum("...ija,...ak->...ijk", sec, jac) + np.einsum("...aj,...ika->...ijk", jac, sec)
        term = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
        gamma = 0.5 * np.einsum("...kl,...ijl->...kij", ginv, term)
        cov = coord_hess - np.einsum("...kij,...k->...ij", gamma, df)
        return np.linalg.solve(g, cov)

    # -- atlas navigation ----------------------------------------------------

    def locate(self, ambient, prefer=None):
        """Find (patch index, coords) for an ambient point, preferring ``prefer``."""
        order = list(range(len(self.patches)))
        if prefer is not None:
            order.remove(prefer)
            order.insert(0, prefer)
        best = None
        for idx in order:
            coords = self.patches[idx].invert(np.asarray(ambient, dtype=float))
            if coords is None:
                continue
            margin = self.patches[idx].boundary_margin(coords)
            if best is None or margin > best[2]:
                best = (idx, coords, margin)
            if margin > 0.2 * np.max(self.patches[idx].hi - self.patches[idx].lo):
                break
        if best is None:
            raise OutOfAtlas(f"point {ambient} is outside the atlas of {self.name}")
        return best[0], best[1]

    # -- critical points -----------------------------------------------------

    def refine_critical_point(self, patch, x0, tol=1e-12, max_iter=60):
        """Damped Newton on grad f = 0 in chart coordinates."""
        x = np.asarray(x0, dtype=float).copy()
        h = 1e-7
        for _ in range(max_iter):
            gval = self.grad(patch, x)
            if np.linalg.norm(gval) < tol:
                break
            jac = np.empty((self.dim, self.dim))
            for j in range(self.dim):
                e = np.zeros(self.dim)
                e[j] = h
                jac[:, j] = (self.grad(patch, x + e) - self.grad(patch, x - e)) / (2 * h)
            step = np.linalg.solve(jac, gval)
            scale = 1.0
            base = np.linalg.norm(gval)
            for _ in range(30):
                trial = x - scale * step
                if np.linalg.norm(self.grad(patch, trial)) < base:
                    break
                scale *= 0.5
            x = x - scale * step
        return x

    def catalog_critical_point(self, cid, patch, coords):
        coords = np.asarray(coords, dtype=float)
        g = self.metric(patch, coords)
        jac = self.patches[patch].jacobian(coords)
        sec = self.patches[patch].second_derivs(coords)
        df = jac.T @ self.height_axis
        coord_hess = np.einsum("ija,a->ij", sec, self.height_axis)
        gamma = self.christoffel(patch, coords)
        cov = coord_hess - np.einsum("kij,k->ij", gamma, df)
        cov = 0.5 * (cov + cov.T)
        lam, vecs = scipy.linalg.eigh(cov, g)
        # deterministic eigenvector signs: largest-|entry| component positive
        for j in range(vecs.shape[1]):
            k = int(np.argmax(np.abs(vecs[:, j])))
            if vecs[k, j] < 0:
                vecs[:, j] = -vecs[:, j]
        if np.min(np.abs(lam)) < 1e-8:
            raise ValueError(f"degenerate critical point {cid} of {self.name}")
        return CriticalPoint(
            id=cid,
            patch=patch,
            coords=coords,
            ambient=self.embed(patch, coords),
            f_value=float(self.f(patch, coords)),
            morse_index=int(np.sum(lam < 0)),
            eigenvalues=lam,
            eigvecs_chart=vecs,
            eigvecs_ambient=jac @ vecs,
        )

    def crit(self, cid) -> CriticalPoint:
        for c in self.critical_points:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def critical_value_gaps(self):
        vals = sorted(c.f_value for c in self.critical_points)
        return np.diff(vals)

    def euler_characteristic(self):
        return int(sum((-1) ** c.morse_index for c in self.critical_points))

    # -- normal charts ---------------------------------------------------------

    def build_normal_chart(self, crit: CriticalPoint, radius, samples=120) -> NormalChart:
        rng = np.random.default_rng(7)
        xi = rng.normal(size=(samples, self.dim))
        xi *= (radius * rng.random(samples) ** (1.0 / self.dim) / np.linalg.norm(xi, axis=1))[:, None]
        chart_pts = crit.coords + xi @ crit.eigvecs_chart.T
        patch = self.patches[crit.patch]
        for pt in chart_pts:
            if not patch.contains(pt):
                raise ChartRadiusTooLarge(
                    f"normal chart of radius {radius} at {crit.id} leaves patch {patch.name}")
        f_model = crit.f_value + 0.5 * np.sum(crit.eigenvalues * xi * xi, axis=1)
        f_true = self.f(crit.patch, chart_pts)
        residual = float(np.max(np.abs(f_true - f_model)))
        g = self.metric(crit.patch, chart_pts)
        g_normal = np.einsum("ai,...ab,bj->...ij", crit.eigvecs_chart, g, crit.eigvecs_chart)
        metric_residual = float(np.max(np.linalg.norm(g_normal - np.eye(self.dim), axis=(-2, -1))))
        gp = self.metric(crit.patch, crit.coords)
        chart = NormalChart(crit=crit, radius=float(radius), residual=residual,
                            metric_residual=metric_residual)
        chart._to_normal = crit.eigvecs_chart.T @ gp
        return chart

    def normal_chart(self, cid) -> NormalChart:
        return self.normal_charts[cid]

    def normal_coords_ambient(self, cid, ambient):
        """Normal coordinates of an ambient point near the critical point ``cid``."""
        ch = self.normal_charts[cid]
        crit = ch.crit
        coords = self.patches[crit.patch].invert(np.asarray(ambient, dtype=float))
        if coords is None:
            return None
        return ch.to_normal(coords - crit.coords)


# -- builtin factory ----------------------------------------------------------


def _sphere_setup(cfg):
    patches = [StereographicPatch(+1), StereographicPatch(-1)]
    setup = MorseSetup("round_sphere", patches, (0.0, 0.0, 1.0),
                       cfg_normal_radius(cfg, "round_sphere"))
    seeds = [("max", 0, np.zeros(2)), ("min", 1, np.zeros(2))]
    _finish_catalog(setup, seeds, cfg)
    return setup


def _torus_setup(cfg, tilt=0.0):
    name = "tilted_torus" if tilt else "upright_torus"
    rot = _rot_x(tilt) if tilt else None
    shifts = [(0.0, 0.0), (np.pi, 0.0), (0.0, np.pi), (np.pi, np.pi)]
    patches = [TorusPatch(cfg.torus_major, cfg.torus_minor, s, rot) for s in shifts]
    setup = MorseSetup(name, patches, (0.0, 0.0, 1.0), cfg_normal_radius(cfg, name))
    # seeds at the untilted critical angles (psi, phi); Newton refines the tilt away
    raw = [("p", (np.pi / 2, 0.0)), ("q", (np.pi / 2, np.pi)),
           ("r", (-np.pi / 2, np.pi)), ("s", (-np.pi / 2, 0.0))]
    seeds = []
    for cid, (psi, phi) in raw:
        patch, coords = _torus_seed_patch(shifts, psi, phi)
        seeds.append((cid, patch, coords))
    _finish_catalog(setup, seeds, cfg)
    return setup


def _torus_seed_patch(shifts, psi, phi):
    for idx, (sp, sf) in enumerate(shifts):
        a = TorusPatch._wrap(psi - sp)
        b = TorusPatch._wrap(phi - sf)
        if max(abs(a), abs(b)) < 0.6 * np.pi:
            return idx, np.array([a, b])
    raise RuntimeError("no torus patch hosts the seed")


def _genus2_setup(cfg):
    surface = GenusTwoSurface(cfg.genus2_level)
    root = np.sqrt(cfg.genus2_level)
    # critical heights solve z^2 (1 - z^2) = +-sqrt(level)
    inner = np.sqrt((1 - np.sqrt(1 - 4 * root)) / 2)
    outer = np.sqrt((1 + np.sqrt(1 - 4 * root)) / 2)
    extreme = np.sqrt((1 + np.sqrt(1 + 4 * root)) / 2)
    heights = [extreme, outer, inner, -inner, -outer, -extreme]
    patches = [MongePatch(surface, (0.0, 0.0), z, extent=0.15) for z in heights]
    setup = MorseSetup("upright_genus2", patches, (0.0, 0.0, 1.0),
                       cfg_normal_radius(cfg, "upright_genus2"))
    seeds = [(f"c{i}", i, np.zeros(2)) for i in range(6)]
    _finish_catalog(setup, seeds, cfg)
    return setup


def cfg_normal_radius(cfg, name):
    return cfg.normal_radius if cfg.normal_radius else _DEFAULT_NORMAL_RADIUS[name]


def _finish_catalog(setup: MorseSetup, seeds, cfg):
    crits = []
    for cid, patch, coords in seeds:
        refined = setup.refine_critical_point(patch, coords, tol=cfg.crit_newton_tol)
        crits.append(setup.catalog_critical_point(cid, patch, refined))
    crits.sort(key=lambda c: -c.f_value)
    setup.critical_points = crits
    fvals = [c.f_value for c in crits]
    if np.min(np.abs(np.diff(fvals))) < 1e-9:
        raise ValueError(f"{setup.name}: critical values are not distinct")
    for c in crits:
        setup.normal_charts[c.id] = setup.build_normal_chart(c, setup.normal_radius)


def make_builtin_setup(name, cfg=None) -> MorseSetup:
    """Construct one of the builtin Morse data by name."""
    from .config import RunConfig

    cfg = cfg or RunConfig()
    if name == "round_sphere":
        return _sphere_setup(cfg)
    if name == "upright_torus":
        return _torus_setup(cfg, tilt=0.0)
    if name == "tilted_torus":
        return _torus_setup(cfg, tilt=cfg.tilt_angle)
    if name == "upright_genus2":
        return _genus2_setup(cfg)
    raise UnknownSetup(f"unknown setup {name!r}; choose one of {BUILTIN_NAMES}")


def eval_gradient(setup: MorseSetup, patch, x):
    """Gradient at a chart point, returned as (chart components, ambient vector)."""
    if not setup.patches[patch].contains(np.asarray(x, dtype=float)):
        raise OutOfAtlas(f"{x} is outside patch {patch} of {setup.name}")
    return setup.grad(patch, x), setup.grad_ambient(patch, x)
