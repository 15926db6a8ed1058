"""Point-mass robot plant and the closed-loop IMC rollout.

Trajectory batches are time-major: states are ``(T+1, n, S)``, inputs
``(T+1, m, S)``, with the scenario index last so that every per-step
operation is a single matrix product over the whole batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .stable_ops import ContractiveOperator, Effective, step


class PlantModel(Protocol):
    n: int
    m: int

    def f(self, x, u):
        """Markovian transition x_{t} - w_{t} = f(x_{t-1}, u_{t-1})."""


@dataclass(frozen=True)
class PointMassParams:
    mass: float = 1.0
    beta1: float = 1.0
    beta2: float = 0.1
    Ts: float = 0.05
    target: tuple[float, float] = (0.0, 0.0)
    # -1: friction opposes motion.  +1 reproduces the sign as typeset in the
    # source equation, which makes the pre-stabilized loop unstable.
    friction_sign: float = -1.0

    def __post_init__(self):
        if self.mass <= 0 or self.Ts <= 0:
            raise ValueError("mass and Ts must be positive")
        if self.friction_sign not in (-1.0, 1.0):
            raise ValueError("friction_sign must be +1 or -1")


@dataclass(frozen=True)
class PointMass:
    """Point-mass robot with the proportional pre-stabilizer F = target - a + u."""

    params: PointMassParams = field(default_factory=PointMassParams)
    n: int = 4
    m: int = 2

    def f(self, x, u):
        p = self.params
        a, q = x[:2], x[2:]
        target = np.asarray(p.target, dtype=np.float64).reshape((2,) + (1,) * (ad.value_of(a).ndim - 1))
        friction = (q * p.beta1 + ad.tanh(q) * p.beta2) * p.friction_sign
        force = (target - a) + u
        a_next = a + q * p.Ts
        q_next = q + (friction + force) * (p.Ts / p.mass)
        return ad.concat([a_next, q_next])


def pointmass_step(p: PointMassParams, x, u, w) -> np.ndarray:
    return np.asarray(PointMass(p).f(np.asarray(x, float), np.asarray(u, float))) + np.asarray(w, float)


@dataclass(frozen=True)
class NoiseDistribution:
    x0_mean: tuple[float, ...] = (2.0, 2.0, 0.0, 0.0)
    x0_std: tuple[float, ...] = (0.2, 0.2, 0.0, 0.0)
    w_std: float = 0.005


def sample_noise(dist: NoiseDistribution, T: int, seed=None, n_scenarios: int = 1) -> np.ndarray:
    """Noise bank of shape (T+1, n, S); slice 0 holds the initial states."""
    if T < 1:
        raise ValueError("horizon T must be at least 1")
    rng = np.random.default_rng(seed)
    n = len(dist.x0_mean)
    w0 = np.asarray(dist.x0_mean)[:, None] + np.asarray(dist.x0_std)[:, None] * rng.standard_normal((n, n_scenarios))
    rest = dist.w_std * rng.standard_normal((T, n, n_scenarios))
    return np.concatenate([w0[None], rest], axis=0)


@dataclass
class Rollout:
    """Closed-loop trajectories for a scenario batch (time-major)."""

    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    w_hat: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.x.shape[0] - 1

    @property
    def S(self) -> int:
        return self.x.shape[2]

    def scenario(self, s: int) -> "Rollout":
        sl = lambda a: None if a is None else a[:, :, s : s + 1]
        return Rollout(sl(self.x), sl(self.u), sl(self.w), sl(self.w_hat))

    def subset(self, idx) -> "Rollout":
        sl = lambda a: None if a is None else a[:, :, idx]
        return Rollout(sl(self.x), sl(self.u), sl(self.w), sl(self.w_hat))


def rollout_graph(plant: PlantModel, eff: Effective, n_state: int, w: np.ndarray):
    """Closed loop u = M(x - F(x, u)); returns stacked (x, u, w_hat).

    Works on numpy matrices or on tape Vars, depending on ``eff``.
    """
    T1, n, S = w.shape
    if n != plant.n:
        raise ValueError(f"noise has {n} channels, plant expects {plant.n}")
    state = np.zeros((n_state, S))
    x = w[0]
    f_prev = None
    xs, us, ws = [], [], []
    for t in range(T1):
        w_hat = x if f_prev is None else x - f_prev
        state, u = step(eff, state, w_hat)
        xs.append(x)
        us.append(u)
        ws.append(w_hat)
        if t + 1 < T1:
            f_prev = plant.f(x, u)
            x = f_prev + w[t + 1]
            if not isinstance(x, ad.Var) and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"rollout diverged at t={t + 1}")
    return ad.stack(xs), ad.stack(us), ad.stack(ws)


def rollout_closed_loop(plant: PlantModel, op: ContractiveOperator, w: np.ndarray) -> Rollout:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        w = w[:, :, None]
    if op.dims.n_in != plant.n or op.dims.n_out != plant.m:
        raise ValueError("operator dimensions do not match the plant")
    x, u, w_hat = rollout_graph(plant, op.effective(), op.dims.n_state, w)
    return Rollout(x, u, w, w_hat)


def resimulate(plant: PlantModel, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Open-loop replay of recorded inputs; reproduces the recorded states."""
    x = [w[0]]
    for t in range(1, w.shape[0]):
        x.append(np.asarray(plant.f(x[-1], u[t - 1])) + w[t])
    return np.stack(x)


def write_trajectory_csv(path, rollout: Rollout) -> None:
    """Columns t, s, x1..xn, u1..um, w1..wn."""
    n, m = rollout.x.shape[1], rollout.u.shape[1]
    header = ["t", "s"] + [f"x{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)] + [f"w{i+1}" for i in range(n)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in range(rollout.S):
            for t in range(rollout.T + 1):
                row = [t, s]
                row += [repr(float(v)) for v in rollout.x[t, :, s]]
                row += [repr(float(v)) for v in rollout.u[t, :, s]]
                row += [repr(float(v)) for v in rollout.w[t, :, s]]
                writer.writerow(row)
