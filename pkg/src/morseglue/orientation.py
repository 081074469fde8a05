"""Sign conventions for trajectory counts.

Reference data: each critical point's unstable eigenframe, in catalog order,
orients its unstable manifold.  For a transverse trajectory with index drop
one, the decaying-at-the-source solution space of the linearized flow is
propagated along the trajectory (orientation-preserving QR) and compared at
the target against (flow direction, target unstable frame).  The convention is
fixed here once; only invariant-level statements (d^2 = 0, homology ranks)
are meaningful across conventions.
"""

from __future__ import annotations

import numpy as np


def _oriented_qr(y):
    q, r = np.linalg.qr(y)
    sgn = np.sign(np.diag(r))
    sgn[sgn == 0] = 1.0
    return q * sgn


def _propagate_oriented(a_nodes, a_mids, h, seed):
    """Propagate span(seed) under y' = -A(s) y, preserving orientation."""
    y = _oriented_qr(seed)
    for k in range(len(a_nodes) - 1):
        k1 = -a_nodes[k] @ y
        k2 = -a_mids[k] @ (y + 0.5 * h * k1)
        k3 = -a_mids[k] @ (y + 0.5 * h * k2)
        k4 = -a_nodes[k + 1] @ (y + h * k3)
        y = _oriented_qr(y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
    return y


def transverse_sign(setup, op) -> int:
    """o(u) for a transverse trajectory with ind(source) = ind(target) + 1."""
    traj = op.trajectory
    p = setup.crit(traj.source)
    q = setup.crit(traj.target)
    k = q.morse_index
    if p.morse_index != k + 1:
        raise ValueError("transverse sign needs an index drop of one")

    # seed: source unstable frame in the operator frame at the left end
    frame_l = op.frames[0]
    seed = frame_l.T @ p.unstable_ambient()
    y_end = _propagate_oriented(op.a_nodes, op.a_mids, op.h, seed)

    frame_r = op.frames[-1]
    vel = op.end_data["velocity_frame"][-1]
    t_hat = vel / np.linalg.norm(vel)
    cols = [y_end.T @ t_hat]
    for j in range(k):
        v = frame_r.T @ q.eigvecs_ambient[:, j]
        cols.append(y_end.T @ v)
    det = np.linalg.det(np.stack(cols, axis=1))
    if det == 0:
        raise ValueError(f"degenerate orientation comparison on {traj.label}")
    return 1 if det > 0 else -1


def fiber_orientation(traj) -> int:
    """Per-component orientation of a rank-one obstruction line.

    The fiber basis element is normalized with positive leading coefficient at
    the source end; the component orientation is the side of the source's
    fastest unstable axis the trajectory departs on.
    """
    return traj.departure_sign()


def perturbed_zero_sign(transverse_signs, fiber_orientations, slope_sign) -> int:
    """Sign of a perturbed glued trajectory.

    Product of the transverse pieces' signs, the obstructed pieces' fiber
    orientations, and the T-derivative sign of the perturbed section at the
    crossing.
    """
    out = int(slope_sign)
    for s in transverse_signs:
        out *= int(s)
    for s in fiber_orientations:
        out *= int(s)
    return out
