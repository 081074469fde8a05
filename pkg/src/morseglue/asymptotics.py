"""Exponential-mode coefficients of trajectory and cokernel tails.

Near a critical point the tail of a trajectory is a sum of decaying
eigenmodes c_i e^{-lambda_i s} v_i over the outgoing (source) or incoming
(target) mode set; cokernel elements decay with the opposite rates
d_i e^{+lambda_i s} v_i.  Coefficients are fitted per mode in log scale with
the slope pinned to the known eigenvalue; a free-slope fit is kept as a
diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import WindowTooShort


@dataclass
class ModeFit:
    label: int                  # paper-style index: -ind..-1 then 1..n-ind
    eigenvalue: float
    coefficient: float          # signed; 0.0 when the mode is absent
    fit_residual: float         # max log deviation over the window
    slope: float | None = None  # free-slope estimate (diagnostic)
    allowed: bool = True        # mode belongs to the end's expansion set
    joint: bool = False         # fitted on a near-degenerate joint block
    joint_vector: np.ndarray | None = None


@dataclass
class AsymptoticCoeffs:
    subject: str
    kind: str                   # "trajectory" | "cokernel"
    end: str                    # "source" | "target"
    crit_id: str
    modes: list
    window: tuple
    trusted: bool = True

    def coefficient(self, label):
        for m in self.modes:
            if m.label == label:
                return m.coefficient
        raise KeyError(label)

    def allowed_modes(self):
        return [m for m in self.modes if m.allowed]

    def leading(self):
        """Allowed mode with the slowest decay (smallest |eigenvalue|)."""
        mods = self.allowed_modes()
        return min(mods, key=lambda m: abs(m.eigenvalue))


def mode_labels(eigenvalues):
    """Paper-style labels for an ascending eigenvalue list."""
    neg = int(np.sum(np.asarray(eigenvalues) < 0))
    return [j - neg if j < neg else j - neg + 1 for j in range(len(eigenvalues))]


def _fit_modes(subject, kind, end, crit, s_win, y, rates, allowed_mask, cfg):
    """Fit y_j(s) ~ c_j e^{rate_j s} per mode over the window."""
    if len(s_win) < 10:
        raise WindowTooShort(f"{subject}/{end}: only {len(s_win)} samples in window")
    labels = mode_labels(crit.eigenvalues)
    floor = cfg.fit_floor_factor * cfg.atol
    modes = []
    used = np.zeros(len(labels), dtype=bool)
    order = np.argsort(np.abs(crit.eigenvalues))
    for j in order:
        if used[j]:
            continue
        group = [j]
        for k in range(len(labels)):
            if k != j and not used[k] and allowed_mask[k] == allowed_mask[j] \
                    and abs(crit.eigenvalues[k] - crit.eigenvalues[j]) < cfg.degeneracy_tol:
                group.append(k)
        used[group] = True
        joint = len(group) > 1
        rate = float(np.mean([rates[k] for k in group]))
        y_grp = y[:, group]
        amp = np.linalg.norm(y_grp, axis=1) if joint else np.abs(y_grp[:, 0])
        sel = amp > floor
        if not allowed_mask[j]:
            # forbidden mode: report the largest back-extrapolated coefficient
            est = float(np.max(amp * np.exp(-rate * s_win))) if np.any(sel) else 0.0
            for k in group:
                modes.append(ModeFit(label=labels[k], eigenvalue=float(crit.eigenvalues[k]),
                                     coefficient=est, fit_residual=0.0, allowed=False,
                                     joint=joint))
            continue
        if np.count_nonzero(sel) < 10:
            for k in group:
                modes.append(ModeFit(label=labels[k], eigenvalue=float(crit.eigenvalues[k]),
                                     coefficient=0.0, fit_residual=0.0, joint=joint))
            continue
        ss, aa = s_win[sel], amp[sel]
        logc = np.log(aa) - rate * ss
        c_log = float(np.mean(logc))
        resid = float(np.max(np.abs(logc - c_log)))
        slope = float(np.polyfit(ss, np.log(aa), 1)[0]) if len(ss) > 2 else None
        mag = float(np.exp(c_log))
        if joint:
            vecs = y_grp[sel] * np.exp(-rate * ss)[:, None]
            vec = vecs.mean(axis=0)
            for idx, k in enumerate(group):
                modes.append(ModeFit(label=labels[k], eigenvalue=float(crit.eigenvalues[k]),
                                     coefficient=float(vec[idx]), fit_residual=resid,
                                     slope=slope, joint=True, joint_vector=vec.copy()))
        else:
            signs = np.sign(y_grp[sel, 0])
            sign = float(np.sign(np.sum(signs)))
            if np.any(signs != signs[0]):
                resid = max(resid, 1.0)       # sign flip in window: untrusted
            k = group[0]
            modes.append(ModeFit(label=labels[k], eigenvalue=float(crit.eigenvalues[k]),
                                 coefficient=sign * mag, fit_residual=resid, slope=slope))
    modes.sort(key=lambda m: m.label)
    trusted = all(m.fit_residual <= cfg.fit_residual_max for m in modes if m.allowed
                  and m.coefficient != 0.0)
    return AsymptoticCoeffs(subject=subject, kind=kind, end=end, crit_id=crit.id,
                            modes=modes, window=(float(s_win[0]), float(s_win[-1])),
                            trusted=trusted)


def extract_trajectory_coeffs(setup, traj, end, cfg) -> AsymptoticCoeffs:
    """Eigen-mode coefficients of a trajectory tail: u ~ sum c_i e^{-lambda_i s} v_i."""
    crit = setup.crit(traj.source if end == "source" else traj.target)
    s_win, xi = traj.normal_tail(end)
    hi = cfg.fit_entry_frac * setup.normal_charts[crit.id].radius
    keep = np.linalg.norm(xi, axis=1) <= hi
    s_win, xi = s_win[keep], xi[keep]
    rates = -crit.eigenvalues                     # y_j ~ c_j e^{-lambda_j s}
    allowed = crit.eigenvalues < 0 if end == "source" else crit.eigenvalues > 0
    return _fit_modes(traj.label, "trajectory", end, crit, s_win, xi, rates, allowed, cfg)


def extract_cokernel_coeffs(setup, fiber, end, cfg, element=0) -> AsymptoticCoeffs:
    """Eigen-mode coefficients of a cokernel element: eta ~ sum d_i e^{+lambda_i s} v_i."""
    traj = fiber.trajectory
    crit = setup.crit(traj.source if end == "source" else traj.target)
    op_s = fiber.op_s
    eta_amb = fiber.element_ambient(element)
    pos = fiber.positions
    dist = np.linalg.norm(pos - crit.ambient, axis=1)
    radius = setup.normal_charts[crit.id].radius
    inside = dist <= cfg.fit_entry_frac * radius
    half = op_s <= op_s[0] + 0.5 * (op_s[-1] - op_s[0]) if end == "source" \
        else op_s >= op_s[0] + 0.5 * (op_s[-1] - op_s[0])
    sel = inside & half
    y = (eta_amb[sel]) @ crit.eigvecs_ambient
    rates = crit.eigenvalues.copy()               # y_j ~ d_j e^{+lambda_j s}
    allowed = crit.eigenvalues > 0 if end == "source" else crit.eigenvalues < 0
    label = f"{traj.label}/eta{element}"
    return _fit_modes(label, "cokernel", end, crit, op_s[sel], y, rates, allowed, cfg)
