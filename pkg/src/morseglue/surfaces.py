"""Parametrization patches for the builtin surfaces.

Every patch maps a box in R^dim smoothly into ambient R^m.  ``embed`` and
``jacobian`` are hand-coded and accept complex input, so second derivatives
come from a complex step on the Jacobian (machine accurate).  The Monge patch
overrides both with implicit-function formulas instead.
"""

from __future__ import annotations

import math

import numpy as np

_CSTEP = 1e-20


class Patch:
    """A single parametrization patch: a domain box plus an embedding."""

    name = "patch"
    dim = 2
    ambient_dim = 3

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)

    def embed(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def second_derivs(self, x):
        """d2 embed / dx_i dx_j, shape (..., dim, dim, ambient)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.dim, self.dim, self.ambient_dim))
        for i in range(self.dim):
            xc = x.astype(complex)
            xc[..., i] += 1j * _CSTEP
            dj = self.jacobian(xc).imag / _CSTEP      # (..., amb, dim)
            out[..., i, :, :] = np.swapaxes(dj, -1, -2)
        # symmetrize; the complex step already is, up to rounding
        return 0.5 * (out + np.swapaxes(out, -3, -2))

    def contains(self, x, margin=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lo + margin) and np.all(x <= self.hi - margin))

    def boundary_margin(self, x):
        """Smallest distance from x to the domain-box boundary (negative outside)."""
        x = np.asarray(x)
        return float(min(np.min(x - self.lo), np.min(self.hi - x)))

    def invert(self, ambient):
        """Coordinates of an ambient point, or None if not on this patch."""
        raise NotImplementedError

    # scalar fast paths for flow integration; None means "use the tensor path"
    def scalar_embed(self, y):
        return None

    def scalar_grad(self, y, height_axis):
        return None


class StereographicPatch(Patch):
    """Unit sphere minus one pole, in stereographic coordinates.

    ``center_pole=+1`` places coordinate origin at the north pole (patch
    omits the south pole) and vice versa.
    """

    def __init__(self, center_pole, extent=3.0):
        super().__init__((-extent, -extent), (extent, extent))
        self.center_pole = float(center_pole)
        self.name = "sph_n" if center_pole > 0 else "sph_s"

    def embed(self, x):
        u, v = x[..., 0], x[..., 1]
        r2 = u * u + v * v
        d = 1.0 + r2
        return np.stack([2 * u / d, 2 * v / d, self.center_pole * (1 - r2) / d], axis=-1)

    def jacobian(self, x):
        u, v = x[..., 0], x[..., 1]
        r2 = u * u + v * v
        d = 1.0 + r2
        d2 = d * d
        zu = -4 * u / d2 * self.center_pole
        zv = -4 * v / d2 * self.center_pole
        xu = 2 / d - 4 * u * u / d2
        xv = -4 * u * v / d2
        yu = xv
        yv = 2 / d - 4 * v * v / d2
        return np.stack([
            np.stack([xu, xv], axis=-1),
            np.stack([yu, yv], axis=-1),
            np.stack([zu, zv], axis=-1),
        ], axis=-2)

    def invert(self, ambient):
        x, y, z = ambient
        denom = 1.0 + self.center_pole * z
        if denom < 1e-12:
            return None
        w = np.array([x / denom, y / denom])
        return w if self.contains(w) else None

    def scalar_embed(self, y):
        u, v = y
        d = 1.0 + u * u + v * v
        return np.array([2 * u / d, 2 * v / d, self.center_pole * (2.0 / d - 1.0)])

    def scalar_grad(self, y, height_axis):
        # conformal metric (4/d^2) I; for the height function the gradient is linear
        if height_axis[2] != 1.0 or height_axis[0] or height_axis[1]:
            return None
        return np.array([-self.center_pole * y[0], -self.center_pole * y[1]])


def _rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


class TorusPatch(Patch):
    """Angular patch of a torus of revolution standing on edge (wheel position).

    The core circle lies in the x-z plane (symmetry axis = y), so the ambient
    height z is a Morse function with four critical points.  ``rotation``
    tilts the whole torus (used for the transverse reference surface).
    """

    def __init__(self, major, minor, shift, rotation=None, extent=0.8 * np.pi):
        super().__init__((-extent, -extent), (extent, extent))
        self.major = float(major)
        self.minor = float(minor)
        self.shift = np.asarray(shift, dtype=float)
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        self.name = f"torus({shift[0]:.2f},{shift[1]:.2f})"

    def _angles(self, x):
        return x[..., 0] + self.shift[0], x[..., 1] + self.shift[1]

    def embed(self, x):
        psi, phi = self._angles(x)
        w = self.major + self.minor * np.cos(phi)
        base = np.stack([w * np.cos(psi), self.minor * np.sin(phi), w * np.sin(psi)], axis=-1)
        return base @ self.rotation.T

    def jacobian(self, x):
        psi, phi = self._angles(x)
        w = self.major + self.minor * np.cos(phi)
        dpsi = np.stack([-w * np.sin(psi), np.zeros_like(psi), w * np.cos(psi)], axis=-1)
        dphi = np.stack([
            -self.minor * np.sin(phi) * np.cos(psi),
            self.minor * np.cos(phi),
            -self.minor * np.sin(phi) * np.sin(psi),
        ], axis=-1)
        jac = np.stack([dpsi, dphi], axis=-1)            # (..., amb, dim)
        return np.einsum("ab,...bd->...ad", self.rotation, jac)

    def invert(self, ambient):
        base = self.rotation.T @ np.asarray(ambient, dtype=float)
        psi = np.arctan2(base[2], base[0])
        w = np.hypot(base[0], base[2]) - self.major
        phi = np.arctan2(base[1], w)
        coords = np.array([self._wrap(psi - self.shift[0]), self._wrap(phi - self.shift[1])])
        return coords if self.contains(coords) else None

    @staticmethod
    def _wrap(a):
        return (a + np.pi) % (2 * np.pi) - np.pi

    def scalar_embed(self, y):
        psi, phi = y[0] + self.shift[0], y[1] + self.shift[1]
        w = self.major + self.minor * math.cos(phi)
        base = (w * math.cos(psi), self.minor * math.sin(phi), w * math.sin(psi))
        r = self.rotation
        return np.array([r[0, 0] * base[0] + r[0, 1] * base[1] + r[0, 2] * base[2],
                         r[1, 0] * base[0] + r[1, 1] * base[1] + r[1, 2] * base[2],
                         r[2, 0] * base[0] + r[2, 1] * base[1] + r[2, 2] * base[2]])

    def scalar_grad(self, y, height_axis):
        # the rotation is an ambient isometry: metric stays diag(w^2, rho^2)
        hb = self.rotation.T @ np.asarray(height_axis, dtype=float)
        psi, phi = y[0] + self.shift[0], y[1] + self.shift[1]
        rho = self.minor
        cpsi, spsi = math.cos(psi), math.sin(psi)
        cphi, sphi = math.cos(phi), math.sin(phi)
        w = self.major + rho * cphi
        df_psi = w * (hb[2] * cpsi - hb[0] * spsi)
        df_phi = rho * (hb[1] * cphi - sphi * (hb[0] * cpsi + hb[2] * spsi))
        return np.array([df_psi / (w * w), df_phi / (rho * rho)])


class ImplicitSurface:
    """Level set F(x, y, z) = 0 with analytic partials up to second order."""

    def value(self, p):
        raise NotImplementedError

    def grad(self, p):
        raise NotImplementedError

    def second(self, p):
        """Hessian of F, shape (..., 3, 3)."""
        raise NotImplementedError


class GenusTwoSurface(ImplicitSurface):
    """(z^2 (1 - z^2) - y^2)^2 + x^2 = level: a genus-2 surface, holes stacked
    along the z axis.  Needs 0 < level < 1/16."""

    def __init__(self, level=0.01):
        if not 0 < level < 1 / 16:
            raise ValueError("genus-2 level must lie in (0, 1/16)")
        self.level = float(level)

    @staticmethod
    def _g(y, z):
        return z * z * (1 - z * z) - y * y

    def value(self, p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        g = self._g(y, z)
        return g * g + x * x - self.level

    def grad(self, p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        g = self._g(y, z)
        gz = 2 * z - 4 * z ** 3
        return np.stack([2 * x, -4 * y * g, 2 * g * gz], axis=-1)

    def second(self, p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        g = self._g(y, z)
        gz = 2 * z - 4 * z ** 3
        gzz = 2 - 12 * z * z
        one = np.ones_like(x)
        zero = np.zeros_like(x)
        fyy = -4 * g + 8 * y * y
        fyz = -4 * y * gz
        fzz = 2 * (gz * gz + g * gzz)
        return np.stack([
            np.stack([2 * one, zero, zero], axis=-1),
            np.stack([zero, fyy, fyz], axis=-1),
            np.stack([zero, fyz, fzz], axis=-1),
        ], axis=-2)


class MongePatch(Patch):
    """Graph patch z = zeta(x, y) of an implicit surface, on a chosen branch."""

    def __init__(self, surface: ImplicitSurface, center_xy, seed_z, extent):
        center_xy = np.asarray(center_xy, dtype=float)
        super().__init__(center_xy - extent, center_xy + extent)
        self.surface = surface
        self.seed_z = float(seed_z)
        self.name = f"monge(z~{seed_z:+.3f})"

    def _solve_z(self, a, b):
        a = np.asarray(a, dtype=float)
        z = np.full(np.shape(a), self.seed_z, dtype=float)
        p = np.stack([a, np.broadcast_to(b, np.shape(a)).astype(float), z], axis=-1)
        for _ in range(60):
            val = self.surface.value(p)
            dz = self.surface.grad(p)[..., 2]
            step = val / dz
            p[..., 2] -= step
            if np.max(np.abs(step)) < 1e-14:
                break
        return p[..., 2]

    def embed(self, x):
        a, b = x[..., 0], x[..., 1]
        z = self._solve_z(a, b)
        return np.stack([np.asarray(a, dtype=float), np.broadcast_to(b, np.shape(a)).astype(float), z], axis=-1)

    def _implicit_derivs(self, x):
        p = self.embed(x)
        g = self.surface.grad(p)
        h = self.surface.second(p)
        fx, fy, fz = g[..., 0], g[..., 1], g[..., 2]
        za = -fx / fz
        zb = -fy / fz
        fxx, fxy, fxz = h[..., 0, 0], h[..., 0, 1], h[..., 0, 2]
        fyy, fyz, fzz = h[..., 1, 1], h[..., 1, 2], h[..., 2, 2]
        zaa = -(fxx + 2 * fxz * za + fzz * za * za) / fz
        zab = -(fxy + fxz * zb + fyz * za + fzz * za * zb) / fz
        zbb = -(fyy + 2 * fyz * zb + fzz * zb * zb) / fz
        return p, za, zb, zaa, zab, zbb

    def jacobian(self, x):
        _, za, zb, *_ = self._implicit_derivs(x)
        one = np.ones_like(za)
        zero = np.zeros_like(za)
        return np.stack([
            np.stack([one, zero], axis=-1),
            np.stack([zero, one], axis=-1),
            np.stack([za, zb], axis=-1),
        ], axis=-2)

    def second_derivs(self, x):
        _, _, _, zaa, zab, zbb = self._implicit_derivs(x)
        zero = np.zeros_like(zaa)
        d2 = np.stack([
            np.stack([np.stack([zero, zero, zaa], axis=-1),
                      np.stack([zero, zero, zab], axis=-1)], axis=-2),
            np.stack([np.stack([zero, zero, zab], axis=-1),
                      np.stack([zero, zero, zbb], axis=-1)], axis=-2),
        ], axis=-3)
        return d2

    def invert(self, ambient):
        x, y, z = ambient
        coords = np.array([x, y])
        if not self.contains(coords):
            return None
        z_branch = self._solve_z(x, y)
        return coords if abs(z - z_branch) < 0.05 else None
