"""Discretization of D_u = nabla_s + Hess f along a trajectory and its adjoint.

The operator is assembled in a parallel-transported orthonormal frame on a
uniform grid, with a Hermite-Simpson (fourth order) two-point stencil.  Decay
boundary conditions are the orthogonal complements of decaying solution
subspaces, propagated from the deepest stored tail samples so that truncation
contaminates the spectrum below the rank thresholds.  Rank decisions use the
full banded spectrum of M^T M.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import (EmptyFiber, FredholmMismatch, OutOfAtlas, SpectralGapAmbiguous,
                     TailsTooShort)
from .trajectories import IsolatedTrajectory, ModuliSpace, Trajectory


# -- frame transport and frame tensors ------------------------------------------


def _coords_in_patch(setup, patch_idx, ambient, hint_coords):
    coords = setup.patches[patch_idx].invert(ambient)
    if coords is None:
        raise OutOfAtlas(f"stencil point {ambient} not in patch {patch_idx}")
    return coords


def build_frames(setup, traj, s, patches, coords, ambient):
    """Parallel-transported orthonormal frame at nodes and interval midpoints.

    Each interval is integrated with two RK4 half-steps of the transport
    equation e' = -Gamma(u)[du/ds, e] in chart components, with stages on the
    true curve (quarter-point stencil).  Frames are stored as ambient columns.
    """
    n_pts, dim = coords.shape
    h = float(s[1] - s[0])

    # stencil rows per interval: [0, 1/4, 1/2, 3/4, 1] in the host patch
    stencil_pts = np.empty((n_pts - 1, 5, dim))
    for k in range(n_pts - 1):
        pidx = patches[k]
        stencil_pts[k, 0] = coords[k]
        for j, frac in enumerate((0.25, 0.5, 0.75)):
            sp = s[k] + frac * h
            pp, xx = traj.eval_chart(sp)
            if pp != pidx:
                xx = _coords_in_patch(setup, pidx, traj.eval_ambient(sp), xx)
            stencil_pts[k, j + 1] = xx
        x1 = coords[k + 1]
        if patches[k + 1] != pidx:
            x1 = _coords_in_patch(setup, pidx, ambient[k + 1], x1)
        stencil_pts[k, 4] = x1

    gam = np.empty((n_pts - 1, 5, dim, dim, dim))
    vel = np.empty((n_pts - 1, 5, dim))
    for pidx in np.unique(patches[:-1]):
        m = patches[:-1] == pidx
        pts = stencil_pts[m].reshape(-1, dim)
        gam[m] = setup.christoffel(pidx, pts).reshape(-1, 5, dim, dim, dim)
        vel[m] = -setup.grad(pidx, pts).reshape(-1, 5, dim)

    jac0 = setup.patches[patches[0]].jacobian(coords[0])
    g0 = jac0.T @ jac0
    frames = np.empty((n_pts, setup.ambient_dim, dim))
    frames[0] = jac0 @ np.linalg.cholesky(np.linalg.inv(g0))
    mid_frames = np.empty((n_pts - 1, setup.ambient_dim, dim))

    def rk4_half(e, g3, v3, hh):
        def rate(i, ee):
            return -np.einsum("kij,j,in->kn", g3[i], v3[i], ee)
        k1 = rate(0, e)
        k2 = rate(1, e + 0.5 * hh * k1)
        k3 = rate(1, e + 0.5 * hh * k2)
        k4 = rate(2, e + hh * k3)
        return e + (hh / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    for k in range(n_pts - 1):
        pidx = patches[k]
        p = setup.patches[pidx]
        jac_k = p.jacobian(stencil_pts[k, 0])
        e = np.linalg.solve(jac_k.T @ jac_k, jac_k.T @ frames[k])
        e_mid = rk4_half(e, gam[k, 0:3], vel[k, 0:3], 0.5 * h)
        e_end = rk4_half(e_mid, gam[k, 2:5], vel[k, 2:5], 0.5 * h)
        jac_m = p.jacobian(stencil_pts[k, 2])
        mid_frames[k] = _orthonormalize(jac_m @ e_mid)
        jac_n = p.jacobian(stencil_pts[k, 4])
        frames[k + 1] = _orthonormalize(jac_n @ e_end)
    return frames, mid_frames, stencil_pts[:, 2]


def _orthonormalize(cols):
    """Symmetric (Loewdin) orthonormalization: nearest orthonormal columns."""
    u, _, vt = np.linalg.svd(cols, full_matrices=False)
    return u @ vt


def frame_hessians(setup, patches, coords, frames):
    """Hessian operator ⟨e_a, Hess(e_b)⟩ in the frame, shape (N, dim, dim)."""
    n_pts, dim = coords.shape
    out = np.empty((n_pts, dim, dim))
    for pidx in np.unique(patches):
        m = patches == pidx
        a_chart = setup.hessian_operator(pidx, coords[m])        # (M, dim, dim)
        jac = setup.patches[pidx].jacobian(coords[m])            # (M, amb, dim)
        g = np.einsum("...ai,...aj->...ij", jac, jac)
        e_chart = np.linalg.solve(g, np.einsum("...ai,...an->...in", jac, frames[m]))
        ge = np.einsum("...ij,...jn->...in", g, np.einsum(
            "...ij,...jn->...in", a_chart, e_chart))
        out[m] = np.einsum("...im,...in->...mn", e_chart, ge)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


# -- operator assembly ----------------------------------------------------------


@dataclass
class LinearOperator:
    """Discretized D_u (and adjoint) on a uniform grid in a parallel frame."""

    trajectory: Trajectory | None
    s: np.ndarray
    h: float
    dim: int
    a_nodes: np.ndarray            # frame Hessians at nodes
    a_mids: np.ndarray
    frames: np.ndarray | None
    end_data: dict
    matrix: scipy.sparse.csr_matrix
    adjoint_matrix: scipy.sparse.csr_matrix
    cfg: object
    positions: np.ndarray | None = None    # ambient positions on the grid
    _spec: dict = field(default_factory=dict)

    # spectral decisions -------------------------------------------------------

    def _spectrum(self, which):
        if which not in self._spec:
            m = self.matrix if which == "direct" else self.adjoint_matrix
            self._spec[which] = _singular_spectrum(m)
        return self._spec[which]

    def null_count(self, which):
        sig = self._spectrum(which)
        return _count_zero(sig, self.cfg)

    def dim_kernel(self):
        # M^T M is square over the node space: its null count is dim ker directly
        return _count_zero(self._spectrum("direct"), self.cfg)

    def dim_cokernel(self):
        return _count_zero(self._spectrum("adjoint"), self.cfg)

    def apply(self, xi_flat):
        return self.matrix @ xi_flat

    def apply_adjoint(self, eta_flat):
        return self.adjoint_matrix @ eta_flat

    def velocity_residual(self):
        """L2 norm of D_u applied to the trajectory's own velocity field."""
        vel = self.end_data["velocity_frame"]
        res = self.matrix @ vel.reshape(-1)
        n_interior = (len(self.s) - 1) * self.dim
        return float(np.sqrt(self.h * np.sum(res[:n_interior] ** 2)))

    def box_pair_defect(self, xi, eta):
        """Discrete integration-by-parts defect of the midpoint-scheme pair."""
        h, a = self.h, self.a_mids
        xi_m = 0.5 * (xi[1:] + xi[:-1])
        eta_m = 0.5 * (eta[1:] + eta[:-1])
        d_xi = (xi[1:] - xi[:-1]) / h + np.einsum("kij,kj->ki", a, xi_m)
        d_eta = -(eta[1:] - eta[:-1]) / h + np.einsum("kij,kj->ki", a, eta_m)
        t1 = h * np.sum(d_xi * eta_m)
        t2 = h * np.sum(xi_m * d_eta)
        return abs(t1 - t2)


def _hs_blocks(a_nodes, a_mids, h):
    """Hermite-Simpson two-point blocks for xi' + A xi, vectorized over intervals."""
    dim = a_nodes.shape[1]
    eye = np.eye(dim)
    a_k = a_nodes[:-1]
    a_k1 = a_nodes[1:]
    half = 0.5 * eye
    alpha = -eye / h + a_k / 6.0 + (2.0 / 3.0) * a_mids @ (half) \
        - (2.0 / 3.0) * (h / 8.0) * np.einsum("kij,kjl->kil", a_mids, a_k)
    beta = eye / h + a_k1 / 6.0 + (2.0 / 3.0) * a_mids @ (half) \
        + (2.0 / 3.0) * (h / 8.0) * np.einsum("kij,kjl->kil", a_mids, a_k1)
    return alpha, beta


def _assemble(a_nodes, a_mids, h, rows_left, rows_right):
    n_pts, dim = a_nodes.shape[0], a_nodes.shape[1]
    n_int = n_pts - 1
    alpha, beta = _hs_blocks(a_nodes, a_mids, h)
    data, rows, cols = [], [], []
    k_idx = np.arange(n_int)
    for i in range(dim):
        for j in range(dim):
            rows.append(k_idx * dim + i)
            cols.append(k_idx * dim + j)
            data.append(alpha[:, i, j])
            rows.append(k_idx * dim + i)
            cols.append((k_idx + 1) * dim + j)
            data.append(beta[:, i, j])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    r0 = n_int * dim
    extra_r, extra_c, extra_d = [], [], []
    for i, vec in enumerate(rows_left):
        extra_r.extend([r0 + i] * dim)
        extra_c.extend(range(dim))
        extra_d.extend(vec)
    r1 = r0 + len(rows_left)
    for i, vec in enumerate(rows_right):
        extra_r.extend([r1 + i] * dim)
        extra_c.extend(range((n_pts - 1) * dim, n_pts * dim))
        extra_d.extend(vec)
    rows = np.concatenate([rows, np.array(extra_r, dtype=int)])
    cols = np.concatenate([cols, np.array(extra_c, dtype=int)])
    data = np.concatenate([data, np.array(extra_d, dtype=float)])
    shape = (r1 + len(rows_right), n_pts * dim)
    return scipy.sparse.csr_matrix((data, (rows, cols)), shape=shape)


def _propagate_subspace(a_nodes, a_mids, h, seed, sign):
    """QR-propagate span(seed) under y' = sign * A(s) y across the given steps."""
    y = np.linalg.qr(seed)[0] if seed.shape[1] else seed
    for k in range(len(a_nodes) - 1):
        k1 = sign * a_nodes[k] @ y
        k2 = sign * a_mids[k] @ (y + 0.5 * h * k1)
        k3 = sign * a_mids[k] @ (y + 0.5 * h * k2)
        k4 = sign * a_nodes[k + 1] @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        y = np.linalg.qr(y)[0]
    return y


def _complement_rows(basis):
    """Rows spanning the orthogonal complement of the given column span."""
    if basis.shape[1] == 0:
        return np.eye(basis.shape[0])
    q, _ = np.linalg.qr(basis, mode="complete")
    return q[:, basis.shape[1]:].T


def _singular_spectrum(m):
    mtm = (m.T @ m).tocsc()
    n = mtm.shape[0]
    bw = 0
    coo = mtm.tocoo()
    if len(coo.row):
        bw = int(np.max(np.abs(coo.row - coo.col)))
    ab = np.zeros((bw + 1, n))
    for k in range(bw + 1):
        diag = mtm.diagonal(k)
        ab[bw - k, k:] = diag if k else mtm.diagonal(0)
    vals = scipy.linalg.eig_banded(ab, lower=False, eigvals_only=True,
                                   overwrite_a_band=True)
    vals = np.clip(vals, 0.0, None)
    return np.sqrt(np.sort(vals))


def _count_zero(sig, cfg):
    """Two-sided zero count: below the relative floor AND gapped away from the
    smallest retained value."""
    smax = sig[-1] if len(sig) else 0.0
    count = int(np.searchsorted(sig, cfg.svd_rel_tol * smax))
    if 0 < count < len(sig):
        largest_zero = sig[count - 1]
        first_kept = sig[count]
        if largest_zero >= cfg.svd_gap_factor * first_kept:
            raise SpectralGapAmbiguous(
                f"no spectral gap between {largest_zero:.3e} and {first_kept:.3e}",
                candidates=(count - 1, count))
        if first_kept < cfg.gap_ambiguity_factor * largest_zero:
            raise SpectralGapAmbiguous(
                f"weak spectral gap between {largest_zero:.3e} and {first_kept:.3e}",
                candidates=(count - 1, count))
    return count


def _near_null_vectors(m, count):
    mtm = (m.T @ m).tocsc()
    n = mtm.shape[0]
    coo = mtm.tocoo()
    bw = int(np.max(np.abs(coo.row - coo.col))) if len(coo.row) else 0
    ab = np.zeros((bw + 1, n))
    for k in range(bw + 1):
        ab[bw - k, k:] = mtm.diagonal(k)
    vals, vecs = scipy.linalg.eig_banded(ab, lower=False, select="i",
                                         select_range=(0, count - 1))
    return vals, vecs


def linearize_along(setup, traj: Trajectory, cfg, ds=None) -> LinearOperator:
    """Discretize D_u on the clip window with decay boundary conditions."""
    ds = ds if ds is not None else cfg.ds
    p = setup.crit(traj.source)
    q = setup.crit(traj.target)

    s_full, patches, coords, ambient, velocity = traj.resample(ds) if ds != cfg.ds \
        else (traj.s, traj.patches, traj.coords, traj.ambient, traj.velocity)

    # clip window: both tails clip_efolds inside the normal charts
    s_src, _ = traj.normal_tail("source")
    s_tgt, _ = traj.normal_tail("target")
    if len(s_src) < 10 or len(s_tgt) < 10:
        raise TailsTooShort(f"{traj.label}: tails not inside normal charts")
    depth_l = cfg.clip_efolds / p.min_abs_eigenvalue()
    depth_r = cfg.clip_efolds / q.min_abs_eigenvalue()
    s_left = s_src[-1] - depth_l
    s_right = s_tgt[0] + depth_r
    if s_left < s_full[0] - 1e-9 or s_right > s_full[-1] + 1e-9:
        raise TailsTooShort(f"{traj.label}: stored tails shallower than "
                            f"{cfg.clip_efolds} e-foldings")

    frames, mid_frames, mid_pts = build_frames(setup, traj, s_full, patches, coords,
                                               ambient)
    a_nodes_full = frame_hessians(setup, patches, coords, frames)
    a_mids_full = frame_hessians(setup, patches[:-1], mid_pts, mid_frames)

    i_left = int(np.searchsorted(s_full, s_left))
    i_right = int(np.searchsorted(s_full, s_right, side="right")) - 1
    sl = slice(i_left, i_right + 1)
    s = s_full[sl]
    a_nodes = a_nodes_full[sl]
    a_mids = a_mids_full[i_left:i_right]
    h = float(s_full[1] - s_full[0])

    lam_l, vec_l = np.linalg.eigh(a_nodes_full[0])
    lam_r, vec_r = np.linalg.eigh(a_nodes_full[-1])
    dim = coords.shape[1]

    def propagate_left(seed, sign):
        if i_left == 0 or not seed.shape[1]:
            return seed
        return _propagate_subspace(a_nodes_full[: i_left + 1],
                                   a_mids_full[:i_left], h, seed, sign)

    def propagate_right(seed, sign):
        if i_right == len(s_full) - 1 or not seed.shape[1]:
            return seed
        # integrate backward in s: reverse arrays and flip the sign
        return _propagate_subspace(a_nodes_full[i_right:][::-1],
                                   a_mids_full[i_right:][::-1], h, seed, -sign)

    # D: kernel decays; left end needs span of lambda<0 modes, right lambda>0
    span_l = propagate_left(vec_l[:, lam_l < 0], sign=-1.0)
    span_r = propagate_right(vec_r[:, lam_r > 0], sign=-1.0)
    matrix = _assemble(a_nodes, a_mids, h,
                       _complement_rows(span_l), _complement_rows(span_r))

    # adjoint D^* = -d/ds + A: solutions of eta' = A eta
    span_l_adj = propagate_left(vec_l[:, lam_l > 0], sign=+1.0)
    span_r_adj = propagate_right(vec_r[:, lam_r < 0], sign=+1.0)
    adj = _assemble(-a_nodes, -a_mids, h,
                    _complement_rows(span_l_adj), _complement_rows(span_r_adj))

    vel_frame = np.einsum("kan,ka->kn", frames[sl], velocity[sl])
    end_data = {
        "left_eigs": (lam_l, vec_l), "right_eigs": (lam_r, vec_r),
        "crit_left": p.id, "crit_right": q.id,
        "span_left": span_l, "span_right": span_r,
        "velocity_frame": vel_frame,
        "full_s": s_full, "clip": (i_left, i_right),
    }
    return LinearOperator(trajectory=traj, s=s, h=h, dim=dim, a_nodes=a_nodes,
                          a_mids=a_mids, frames=frames[sl], end_data=end_data,
                          matrix=matrix, adjoint_matrix=adj, cfg=cfg,
                          positions=ambient[sl])


def operator_from_profile(s, a_of_s, cfg) -> LinearOperator:
    """Synthetic operator xi' + A(s) xi on a given grid (identity frame)."""
    s = np.asarray(s, dtype=float)
    h = float(s[1] - s[0])
    a_nodes = np.stack([np.atleast_2d(a_of_s(x)) for x in s])
    a_mids = np.stack([np.atleast_2d(a_of_s(x)) for x in s[:-1] + 0.5 * h])
    dim = a_nodes.shape[1]
    lam_l, vec_l = np.linalg.eigh(a_nodes[0])
    lam_r, vec_r = np.linalg.eigh(a_nodes[-1])
    rows_l = _complement_rows(vec_l[:, lam_l < 0])
    rows_r = _complement_rows(vec_r[:, lam_r > 0])
    matrix = _assemble(a_nodes, a_mids, h, rows_l, rows_r)
    adj = _assemble(-a_nodes, -a_mids, h,
                    _complement_rows(vec_l[:, lam_l > 0]),
                    _complement_rows(vec_r[:, lam_r < 0]))
    end_data = {"left_eigs": (lam_l, vec_l), "right_eigs": (lam_r, vec_r),
                "crit_left": None, "crit_right": None,
                "velocity_frame": np.zeros((len(s), dim))}
    return LinearOperator(trajectory=None, s=s, h=h, dim=dim, a_nodes=a_nodes,
                          a_mids=a_mids, frames=None, end_data=end_data,
                          matrix=matrix, adjoint_matrix=adj, cfg=cfg)


def kernel_cokernel_dims(op: LinearOperator, expected_index=None):
    """(dim ker, dim coker); asserts the Fredholm index identity when known."""
    dims = (op.dim_kernel(), op.dim_cokernel())
    if expected_index is None and op.trajectory is not None:
        setup = op.trajectory.setup
        expected_index = setup.crit(op.trajectory.source).morse_index \
            - setup.crit(op.trajectory.target).morse_index
    if expected_index is not None and dims[0] - dims[1] != expected_index:
        raise FredholmMismatch(
            f"dim ker - dim coker = {dims[0] - dims[1]} != index {expected_index}"
            + (f" on {op.trajectory.label}" if op.trajectory is not None else ""))
    return dims


@dataclass
class ObstructionFiber:
    trajectory: Trajectory | None
    basis: np.ndarray              # (rank, N, dim) frame components, L2-orthonormal
    rank: int
    residuals: list
    frames: np.ndarray | None = None
    op_s: np.ndarray | None = None
    positions: np.ndarray | None = None

    def element_ambient(self, i):
        return np.einsum("kan,kn->ka", self.frames, self.basis[i])


def obstruction_fiber(op: LinearOperator) -> ObstructionFiber:
    """L2-orthonormal basis of the near-kernel of the adjoint discretization."""
    rank = op.dim_cokernel()
    if rank == 0:
        raise EmptyFiber("trajectory is transverse: no obstruction fiber")
    n_pts = len(op.s)
    _, vecs = _near_null_vectors(op.adjoint_matrix, rank)
    basis = []
    residuals = []
    for i in range(vecs.shape[1]):
        eta = vecs[:, i].reshape(n_pts, op.dim)
        norm = np.sqrt(op.h * np.sum(eta * eta))
        eta = eta / norm
        # deterministic sign: leading decaying mode at the left end positive
        lam_l, vec_l = op.end_data["left_eigs"]
        pos = np.where(lam_l > 0)[0]
        signer = 0.0
        if len(pos):
            lead = vec_l[:, pos[np.argmin(lam_l[pos])]]
            k_probe = min(len(op.s) - 1, max(3, int(0.05 * len(op.s))))
            signer = float(eta[k_probe] @ lead)
        if signer == 0.0:
            signer = eta.flat[np.argmax(np.abs(eta))]
        if signer < 0:
            eta = -eta
        res = op.adjoint_matrix @ eta.reshape(-1)
        residuals.append(float(np.sqrt(op.h * np.sum(res ** 2))))
        basis.append(eta)
    return ObstructionFiber(trajectory=op.trajectory,
                            basis=np.stack(basis) if basis else np.zeros((0, n_pts, op.dim)),
                            rank=rank, residuals=residuals, frames=op.frames,
                            op_s=op.s, positions=op.positions)


@dataclass
class CleanReport:
    source: str
    target: str
    component_status: list         # per component: dict(status, dims, ...)

    def overall(self):
        labels = {c["status"] for c in self.component_status}
        if not labels:
            return "empty"
        if labels <= {"transverse"}:
            return "transverse"
        if labels <= {"clean", "transverse"}:
            return "clean"
        return "unresolved"


def check_clean(setup, moduli: ModuliSpace, cfg, ops_cache=None) -> CleanReport:
    """Label each moduli component transverse / clean / unresolved."""
    statuses = []
    for comp in moduli.components:
        trajs = [comp.trajectory] if isinstance(comp, IsolatedTrajectory) \
            else comp.trajectories
        dims_list = []
        for t in trajs:
            op = None if ops_cache is None else ops_cache.get(t.label)
            if op is None:
                op = linearize_along(setup, t, cfg)
                if ops_cache is not None:
                    ops_cache[t.label] = op
            dims_list.append(kernel_cokernel_dims(op))
        kers = {d[0] for d in dims_list}
        cokers = {d[1] for d in dims_list}
        if len(kers) == 1 and len(cokers) == 1:
            coker = cokers.pop()
            status = "transverse" if coker == 0 else "clean"
            dims = (kers.pop(), coker)
        else:
            status, dims = "unresolved", None
        comp.cut_status = status
        comp.dims = dims
        statuses.append({"status": status, "dims": dims, "n_members": len(trajs)})
    return CleanReport(source=moduli.source, target=moduli.target,
                       component_status=statuses)
