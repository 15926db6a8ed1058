"""ADMM for constrained performance boosting.

Each outer iteration ``j``:

1. a few full-batch Adam steps on ``L^e + (rho/2) L^a`` (theta block),
2. projection of ``trajectory + multiplier`` onto the constraint sets,
3. scaled dual ascent ``lam <- lam + (trajectory - copy)``,

followed by the residual test and, if not converged, the residual-balancing
update of ``rho`` (with multiplier rescaling) for the next iteration.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .constraints import TrajectoryConstraint
from .losses import AdmmTerms, BoostLossConfig, CbfConfig, boosting_loss, total_training_loss
from .plant import PlantModel, Rollout, rollout_closed_loop, rollout_graph
from .stable_ops import ContractiveOperator

LOG_COLUMNS = ("j", "norm_r", "norm_delta", "eps_r", "eps_delta", "rho", "eta", "train_loss")


@dataclass(frozen=True)
class AdmmConfig:
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    tau_inc: float = 2.0
    tau_dec: float = 0.5
    mu: float = 10.0
    rho0: float = 0.5
    eta0: float = 1e-3
    gamma: float = 0.5
    J: int = 50
    eta_min: float = 1e-6
    epochs_per_step: int = 6
    max_iters: int = 2000
    reset_moments: bool = False
    warm_start_epochs: int = 0

    def __post_init__(self):
        if self.tau_inc <= 1 or not 0 < self.tau_dec < 1:
            raise ValueError("need tau_inc > 1 and tau_dec in (0, 1)")
        if self.mu <= 0 or self.rho0 <= 0 or self.eta0 <= 0 or self.eta_min <= 0:
            raise ValueError("mu, rho0, eta0 and eta_min must be positive")
        if not 0 < self.gamma < 1 or self.J < 1:
            raise ValueError("need gamma in (0, 1) and J >= 1")
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValueError("tolerances must be non-negative")
        if self.epochs_per_step < 0 or self.max_iters < 0:
            raise ValueError("iteration counts must be non-negative")


@dataclass
class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    k: int = 0

    def reset(self) -> None:
        self.m = self.v = None
        self.k = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.k += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.k)
        v_hat = self.v / (1 - self.beta2**self.k)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Problem:
    """Everything the theta block needs: plant, operator template, scenarios, loss."""

    plant: PlantModel
    operator: ContractiveOperator
    noise: np.ndarray
    loss: BoostLossConfig
    constraints: TrajectoryConstraint
    threads: int = 1

    @property
    def S(self) -> int:
        return self.noise.shape[2]

    @property
    def T(self) -> int:
        return self.noise.shape[0] - 1

    def rollout(self, theta: np.ndarray) -> Rollout:
        return rollout_closed_loop(self.plant, self.operator.with_theta(theta), self.noise)

    def boost_value(self, rollout: Rollout) -> float:
        return float(boosting_loss(self.loss, rollout.x, rollout.u)) / rollout.S

    def objective(self, theta: np.ndarray, mode: str, admm: AdmmTerms | None = None,
                  cbf: CbfConfig | None = None) -> tuple[float, np.ndarray, float]:
        """(total, gradient, boosting part), all scenario means.

        Scenarios are split into ``threads`` chunks, each on its own tape; the
        chunk results are reduced in scenario order.
        """
        chunks = [c for c in np.array_split(np.arange(self.S), max(1, min(self.threads, self.S))) if c.size]

        def run(idx):
            return _chunk_objective(self, theta, idx, mode, admm, cbf)

        if len(chunks) == 1:
            results = [run(chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                results = list(pool.map(run, chunks))
        total = sum(r[0] for r in results)
        grad = sum(r[1] for r in results)
        boost = sum(r[2] for r in results)
        return total, grad, boost


def _chunk_objective(problem: Problem, theta, idx, mode, admm, cbf):
    S = problem.S
    w = problem.noise[:, :, idx]
    sub = None
    if admm is not None and admm.xp is not None:
        sub = AdmmTerms(admm.rho, admm.xp[:, :, idx], admm.up[:, :, idx], admm.lam_x[:, :, idx], admm.lam_u[:, :, idx])
    elif admm is not None:
        sub = admm
    tape = ad.Tape()
    eff = problem.operator.with_theta(theta).effective(tape)
    x, u, _ = rollout_graph(problem.plant, eff, problem.operator.dims.n_state, w)
    obj = total_training_loss(mode, problem.loss, x, u, admm=sub, cbf=cbf)
    # chunk means -> contribution to the full-batch mean
    weight = len(idx) / S
    grad = tape.backward(obj.total) * weight
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return float(ad.value_of(obj.total)) * weight, grad, float(ad.value_of(obj.boost)) * weight


@dataclass
class Residuals:
    r: np.ndarray
    delta: np.ndarray
    norm_r: float
    norm_delta: float
    eps_r: float
    eps_delta: float

    @property
    def converged(self) -> bool:
        return self.norm_r <= self.eps_r and self.norm_delta <= self.eps_delta


@dataclass
class AdmmState:
    theta: np.ndarray
    xp: np.ndarray
    up: np.ndarray
    lam_x: np.ndarray
    lam_u: np.ndarray
    rho: float
    eta: float
    j: int = 0
    adam: Adam = field(default_factory=Adam)

    def terms(self) -> AdmmTerms:
        return AdmmTerms(self.rho, self.xp, self.up, self.lam_x, self.lam_u)

    @property
    def lam_norm(self) -> float:
        return math.sqrt(float(np.vdot(self.lam_x, self.lam_x) + np.vdot(self.lam_u, self.lam_u)))


@dataclass
class IterateRecord:
    j: int
    norm_r: float
    norm_delta: float
    eps_r: float
    eps_delta: float
    rho: float
    eta: float
    train_loss: float
    # max |rho' lam' - rho lam| of the adaptation performed after this iterate
    dual_scale_error: float = 0.0
    converged: bool = False

    def row(self) -> list:
        return [self.j] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]


@dataclass
class AdmmResult:
    theta: np.ndarray
    log: list[IterateRecord]
    loss_trace: list[float]
    state: AdmmState
    converged: bool


def update_learning_rate(j: int, cfg: AdmmConfig) -> float:
    """eta0 * gamma^floor(j/J), floored at eta_min."""
    if j < 0:
        raise ValueError("iteration index must be non-negative")
    return max(cfg.eta_min, cfg.eta0 * cfg.gamma ** (j // cfg.J))


def inner_gd_step(state: AdmmState, problem: Problem, cfg: AdmmConfig,
                  trace: list[float] | None = None) -> np.ndarray:
    """``epochs_per_step`` full-batch Adam steps on L^e + (rho/2) L^a."""
    if cfg.reset_moments:
        state.adam.reset()
    theta = state.theta
    terms = state.terms()
    for _ in range(cfg.epochs_per_step):
        _, grad, boost = problem.objective(theta, "admm_pb", admm=terms)
        if trace is not None:
            trace.append(boost)
        theta = state.adam.step(theta, grad, state.eta)
    state.theta = theta
    return theta


def projection_step(state: AdmmState, rollout: Rollout, constraints: TrajectoryConstraint):
    if rollout.x.shape != state.lam_x.shape or rollout.u.shape != state.lam_u.shape:
        raise ValueError("rollout and multiplier shapes differ")
    return constraints.project_trajectory(rollout.x + state.lam_x, rollout.u + state.lam_u)


def multiplier_update(state: AdmmState, rollout: Rollout) -> tuple[np.ndarray, np.ndarray]:
    state.lam_x = state.lam_x + (rollout.x - state.xp)
    state.lam_u = state.lam_u + (rollout.u - state.up)
    return state.lam_x, state.lam_u


def compute_residuals(state: AdmmState, rollout: Rollout, prev_xp: np.ndarray, prev_up: np.ndarray,
                      cfg: AdmmConfig, n_params: int) -> Residuals:
    """Primal/dual residuals and adaptive tolerances (uses the current rho)."""
    r = np.concatenate([(rollout.x - state.xp).ravel(), (rollout.u - state.up).ravel()])
    delta = -state.rho * np.concatenate([(state.xp - prev_xp).ravel(), (state.up - prev_up).ravel()])
    c = r.size
    o = c + n_params
    z = math.sqrt(float(np.vdot(rollout.x, rollout.x) + np.vdot(rollout.u, rollout.u)))
    zp = math.sqrt(float(np.vdot(state.xp, state.xp) + np.vdot(state.up, state.up)))
    eps_r = math.sqrt(c) * cfg.eps_abs + cfg.eps_rel * max(z, zp)
    eps_delta = math.sqrt(o) * cfg.eps_abs + cfg.eps_rel * state.lam_norm
    return Residuals(r, delta, float(np.linalg.norm(r)), float(np.linalg.norm(delta)), eps_r, eps_delta)


def update_penalty(state: AdmmState, res: Residuals, cfg: AdmmConfig) -> float:
    """Residual balancing; returns max |rho lam| drift caused by the rescaling."""
    if res.norm_r > cfg.mu * res.norm_delta:
        tau = cfg.tau_inc
    elif res.norm_delta > cfg.mu * res.norm_r:
        tau = cfg.tau_dec
    else:
        return 0.0
    before_x, before_u = state.rho * state.lam_x, state.rho * state.lam_u
    state.rho = tau * state.rho
    state.lam_x = state.lam_x / tau
    state.lam_u = state.lam_u / tau
    drift = max(
        float(np.max(np.abs(state.rho * state.lam_x - before_x), initial=0.0)),
        float(np.max(np.abs(state.rho * state.lam_u - before_u), initial=0.0)),
    )
    return drift


def init_state(problem: Problem, theta0: np.ndarray, cfg: AdmmConfig) -> AdmmState:
    """Copies start at the projection of the theta0 rollout, multipliers at zero."""
    theta = np.array(theta0, dtype=np.float64)
    adam = Adam()
    for _ in range(cfg.warm_start_epochs):
        _, grad, _ = problem.objective(theta, "admm_pb", admm=AdmmTerms(0.0, None, None, None, None))
        theta = adam.step(theta, grad, cfg.eta0)
    ro = problem.rollout(theta)
    xp, up = problem.constraints.project_trajectory(ro.x, ro.u)
    return AdmmState(
        theta=theta,
        xp=xp,
        up=up,
        lam_x=np.zeros_like(ro.x),
        lam_u=np.zeros_like(ro.u),
        rho=cfg.rho0,
        eta=cfg.eta0,
        adam=adam if cfg.warm_start_epochs else Adam(),
    )


def run_admm_pb(cfg: AdmmConfig, problem: Problem, theta0: np.ndarray,
                callback: Callable[[AdmmState, IterateRecord], None] | None = None) -> AdmmResult:
    state = init_state(problem, theta0, cfg)
    log: list[IterateRecord] = []
    trace: list[float] = []
    converged = False
    n_params = problem.operator.dims.n_params
    for j in range(cfg.max_iters):
        state.j = j
        state.eta = update_learning_rate(j, cfg)
        try:
            inner_gd_step(state, problem, cfg, trace)
            rollout = problem.rollout(state.theta)
        except FloatingPointError as exc:
            raise FloatingPointError(f"ADMM iteration {j}: {exc}") from exc
        prev_xp, prev_up = state.xp, state.up
        state.xp, state.up = projection_step(state, rollout, problem.constraints)
        multiplier_update(state, rollout)
        res = compute_residuals(state, rollout, prev_xp, prev_up, cfg, n_params)
        rec = IterateRecord(j, res.norm_r, res.norm_delta, res.eps_r, res.eps_delta,
                            state.rho, state.eta, problem.boost_value(rollout))
        log.append(rec)
        if res.converged:
            rec.converged = converged = True
            if callback:
                callback(state, rec)
            break
        rec.dual_scale_error = update_penalty(state, res, cfg)
        if callback:
            callback(state, rec)
    return AdmmResult(state.theta, log, trace, state, converged)


def write_iterate_log(path, log: list[IterateRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for rec in log:
            writer.writerow(rec.row())


def read_iterate_log(path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "j" else float(v)) for k, v in row.items()} for row in rows]
