"""Run configuration: every tolerance and discretization choice in one place."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict


@dataclass
class RunConfig:
    """All knobs of a pipeline run.

    ``sigma`` maps obstructed-component ids (``"q->r#0"`` style) to nonzero
    reals; components missing from the map get ``sigma_default``.
    """

    setup: str = "upright_torus"

    # geometry
    torus_major: float = 2.0
    torus_minor: float = 1.0
    tilt_angle: float = 0.1
    genus2_level: float = 0.01
    normal_radius: float | None = None   # None -> per-setup default
    crit_newton_tol: float = 1e-12

    # representative gauge
    eps_factor: float = 0.05             # epsilon = eps_factor * min critical-value gap

    # flow integration
    rtol: float = 1e-10
    atol: float = 1e-12
    sweep_rtol: float = 1e-7             # classification sweeps only
    sweep_atol: float = 1e-9
    shoot_offset_factor: float = 1e-4    # start offset, fraction of normal radius
    capture_factor: float = 1e-4         # capture depth, fraction of normal radius
    horizon: float = 400.0

    # moduli search
    sweep_count: int = 120
    family_samples: int = 36
    bisect_tol: float = 1e-10            # angular resolution for 0-dim isolation
    merge_tol: float = 1e-5              # Hausdorff dedup distance
    near_radius_factor: float = 0.5      # saddle-passage detection radius

    # linearization
    ds: float = 0.04                     # operator grid spacing
    clip_efolds: float = 3.0             # tail depth kept inside normal charts
    svd_rel_tol: float = 1e-6
    svd_gap_factor: float = 0.1
    gap_ambiguity_factor: float = 10.0

    # asymptotic fits
    fit_floor_factor: float = 10.0       # noise floor = factor * atol
    fit_entry_frac: float = 0.9          # start of window, fraction of normal radius
    degeneracy_tol: float = 1e-6
    fit_residual_max: float = 0.05       # above this, coefficients flagged untrusted

    # gluing
    gluing_R: float | None = None        # None -> from clip_efolds / min |lambda|
    T_max: float | None = None           # None -> R + ramp_delta2 + 5 / min |lambda|
    ramp_delta1: float = 1.0
    ramp_delta2: float = 5.0
    c1_bound: float = 1.0
    sigma: dict[str, float] = field(default_factory=dict)
    sigma_default: float = 0.1
    count_grid: int = 2000
    margin_factor: float = 10.0          # |s0| must beat this times the h.o.t. estimate

    # homology / output
    ring: str = "Z"
    out_dir: str = "out"
    seed: int = 0

    def validate(self):
        for name in ("rtol", "atol", "sweep_rtol", "sweep_atol", "ds",
                     "svd_rel_tol", "bisect_tol", "merge_tol", "eps_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.ramp_delta1 >= self.ramp_delta2:
            raise ValueError("ramp_delta1 must be smaller than ramp_delta2")
        if any(v == 0 for v in self.sigma.values()) or self.sigma_default == 0:
            raise ValueError("sigma values must be nonzero")
        if self.ring not in ("Z", "Z2"):
            raise ValueError("ring must be 'Z' or 'Z2'")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls(**data)
        return cfg.validate()

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
