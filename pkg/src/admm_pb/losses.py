"""Training objectives.

Every loss takes time-major batches ``x`` of shape (T+1, n, S) and ``u`` of
shape (T+1, m, S) and returns the *sum* over scenarios.  The functions work
on numpy arrays and on tape Vars alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class BoostLossConfig:
    Q: tuple[tuple[float, ...], ...] = tuple(tuple(float(i == j) for j in range(4)) for i in range(4))
    R: tuple[tuple[float, ...], ...] = ((0.1, 0.0), (0.0, 0.1))
    alpha: float = 10.0
    obstacle: tuple[float, float] = (1.0, 0.5)
    radius: float = 0.75
    nu: float = 0.001
    safety_factor: float = 1.1

    def __post_init__(self):
        for name in ("Q", "R"):
            M = np.asarray(getattr(self, name), float)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        if min(self.alpha, self.nu, self.radius) < 0:
            raise ValueError("alpha, nu and radius must be non-negative")

    @property
    def threshold(self) -> float:
        # squared distance compared against safety_factor * radius, as stated
        return self.safety_factor * self.radius


@dataclass(frozen=True)
class CbfConfig:
    omega: float = 1.0
    zeta: float = 0.2
    bound: float = 0.5

    def __post_init__(self):
        if self.omega < 0 or not 0.0 < self.zeta < 1.0:
            raise ValueError("need omega >= 0 and zeta in (0, 1)")


def _quad(M, z):
    M = np.asarray(M, dtype=np.float64)
    if not np.any(M):
        return 0.0
    return ad.total(z * (M @ z))


def lq_loss(cfg: BoostLossConfig, x, u):
    """sum_t x_t' Q x_t + u_t' R u_t, summed over scenarios."""
    return _quad(cfg.Q, x) + _quad(cfg.R, u)


def collision_loss(cfg: BoostLossConfig, x):
    """sum over steps with ||a_t - a_obs||^2 <= threshold of (||a_t - a_obs||^2 + nu)."""
    obs = np.asarray(cfg.obstacle, dtype=np.float64).reshape(1, 2, 1)
    d = x[:, 0:2] - obs
    dist_sq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    active = (ad.value_of(dist_sq) <= cfg.threshold).astype(np.float64)
    if not active.any():
        return 0.0
    return ad.total(dist_sq * active) + cfg.nu * float(active.sum())


def boosting_loss(cfg: BoostLossConfig, x, u):
    return lq_loss(cfg, x, u) + cfg.alpha * collision_loss(cfg, x)


def augmented_term(x, u, xp, up, lam_x, lam_u):
    """(1/S) sum_s ||x - x^p + lam^x||^2 + ||u - u^p + lam^u||^2."""
    S = ad.value_of(x).shape[-1]
    for a, b in ((x, xp), (x, lam_x), (u, up), (u, lam_u)):
        if ad.value_of(a).shape != np.shape(b):
            raise ValueError(f"shape mismatch: {ad.value_of(a).shape} vs {np.shape(b)}")
    gx = x + (np.asarray(lam_x) - np.asarray(xp))
    gu = u + (np.asarray(lam_u) - np.asarray(up))
    return (ad.norm_sq(gx) + ad.norm_sq(gu)) * (1.0 / S)


def cbf_penalty(cfg: CbfConfig, x):
    """omega * sum of the four hinge streams (lower/upper margin, both axes)."""
    if cfg.omega == 0.0:
        return 0.0
    q = x[:, 2:4]
    decay = 1.0 - cfg.zeta
    # lower-bound margin q + bound, upper-bound margin bound - q
    lo_now, lo_next = q[:-1] + cfg.bound, q[1:] + cfg.bound
    hi_now, hi_next = cfg.bound - q[:-1], cfg.bound - q[1:]
    hinge = ad.total(ad.max0(lo_now * decay - lo_next)) + ad.total(ad.max0(hi_now * decay - hi_next))
    return hinge * cfg.omega


@dataclass
class AdmmTerms:
    """Copy variables, scaled multipliers and penalty entering the augmented loss."""

    rho: float
    xp: np.ndarray
    up: np.ndarray
    lam_x: np.ndarray
    lam_u: np.ndarray


@dataclass
class Objective:
    """Breakdown of one training-loss evaluation (scenario means)."""

    total: object
    boost: object
    extra: object = field(default=0.0)


def total_training_loss(mode: str, cfg: BoostLossConfig, x, u, admm: AdmmTerms | None = None,
                        cbf: CbfConfig | None = None) -> Objective:
    """Per-mode objective averaged over scenarios.

    ``admm_pb``: L^e + (rho/2) L^a;  ``cbf_baseline``: mean of L + CBF penalties.
    """
    S = ad.value_of(x).shape[-1]
    boost = boosting_loss(cfg, x, u) * (1.0 / S)
    if mode == "admm_pb":
        if admm is None:
            raise ValueError("admm_pb mode requires the ADMM copy variables and multipliers")
        if admm.rho == 0.0:
            return Objective(boost, boost, 0.0)
        extra = augmented_term(x, u, admm.xp, admm.up, admm.lam_x, admm.lam_u) * (0.5 * admm.rho)
        return Objective(boost + extra, boost, extra)
    if mode == "cbf_baseline":
        if cbf is None:
            raise ValueError("cbf_baseline mode requires a CbfConfig")
        extra = cbf_penalty(cbf, x)
        if not isinstance(extra, ad.Var) and extra == 0.0:
            return Objective(boost, boost, 0.0)
        extra = extra * (1.0 / S)
        return Objective(boost + extra, boost, extra)
    raise ValueError(f"unknown training mode {mode!r}")
