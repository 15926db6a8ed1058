"""Convex sets, their Euclidean projections, and the velocity-violation metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo, up = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != up.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if np.any(lo > up):
            raise ValueError("box requires lower <= upper")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def project(self, v: np.ndarray) -> np.ndarray:
        lo, up = _column(self.lower, v), _column(self.upper, v)
        return np.minimum(np.maximum(v, lo), up)

    def contains(self, v: np.ndarray) -> np.ndarray:
        lo, up = _column(self.lower, v), _column(self.upper, v)
        return np.all((v >= lo) & (v <= up), axis=0)

    def to_json(self) -> dict:
        enc = lambda xs: [None if np.isinf(x) else float(x) for x in xs]
        return {"type": "box", "lower": enc(self.lower), "upper": enc(self.upper)}


_BALL_SLACK = 1.0 + 1e-12


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")

    @property
    def dim(self) -> int:
        return len(self.center)

    def project(self, v: np.ndarray) -> np.ndarray:
        c = _column(self.center, v)
        d = v - c
        dist = np.sqrt(np.sum(d * d, axis=0))
        # points inside are returned untouched, bit for bit; the slack keeps a
        # rescaled point (which may land a few ulps outside) a fixed point
        outside = dist > self.radius * _BALL_SLACK
        scale = np.where(outside, self.radius / np.where(dist > 0, dist, 1.0), 1.0)
        return np.where(outside, c + d * scale, v)

    def contains(self, v: np.ndarray) -> np.ndarray:
        d = v - _column(self.center, v)
        return np.sqrt(np.sum(d * d, axis=0)) <= self.radius * _BALL_SLACK

    def to_json(self) -> dict:
        return {"type": "ball", "center": [float(c) for c in self.center], "radius": float(self.radius)}


@dataclass(frozen=True)
class Unconstrained:
    dim: int

    def project(self, v: np.ndarray) -> np.ndarray:
        return v

    def contains(self, v: np.ndarray) -> np.ndarray:
        return np.ones(np.shape(v)[1:], dtype=bool)

    def to_json(self) -> dict:
        return {"type": "all", "dim": self.dim}


ConvexSet = Box | Ball | Unconstrained


def _column(vec, like: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if like.shape[0] != vec.shape[0]:
        raise ValueError(f"dimension mismatch: set has {vec.shape[0]}, vector has {like.shape[0]}")
    return vec.reshape((-1,) + (1,) * (like.ndim - 1))


def project(cset: ConvexSet, v) -> np.ndarray:
    """Euclidean projection of ``v`` (shape (dim, ...)) onto ``cset``."""
    return cset.project(np.asarray(v, dtype=np.float64))


def set_from_json(spec: dict) -> ConvexSet:
    kind = spec["type"]
    if kind == "box":
        dec = lambda xs, inf: tuple(inf if x is None else float(x) for x in xs)
        return Box(dec(spec["lower"], -np.inf), dec(spec["upper"], np.inf))
    if kind == "ball":
        return Ball(tuple(spec["center"]), float(spec["radius"]))
    if kind == "all":
        return Unconstrained(int(spec["dim"]))
    raise ValueError(f"unknown set type {kind!r}")


@dataclass(frozen=True)
class TrajectoryConstraint:
    """Time-invariant state and input sets applied at every step."""

    state_set: ConvexSet
    input_set: ConvexSet

    def project_trajectory(self, x_shift: np.ndarray, u_shift: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return project_trajectory(self, x_shift, u_shift)

    def to_json(self) -> dict:
        return {"state": self.state_set.to_json(), "input": self.input_set.to_json()}

    @classmethod
    def from_json(cls, spec: dict) -> "TrajectoryConstraint":
        return cls(set_from_json(spec["state"]), set_from_json(spec["input"]))


def velocity_box(limit: float = 0.5) -> TrajectoryConstraint:
    """Benchmark constraints: |q| <= limit, positions and inputs free."""
    inf = np.inf
    return TrajectoryConstraint(Box((-inf, -inf, -limit, -limit), (inf, inf, limit, limit)), Unconstrained(2))


def project_trajectory(tc: TrajectoryConstraint, x_shift, u_shift) -> tuple[np.ndarray, np.ndarray]:
    """Per-step projection of (T+1, dim[, S]) trajectories; separable in time."""
    x_shift = np.asarray(x_shift, dtype=np.float64)
    u_shift = np.asarray(u_shift, dtype=np.float64)
    if x_shift.shape[0] != u_shift.shape[0]:
        raise ValueError("state and input trajectories must have the same length")
    # move the time axis behind the set dimension so sets see (dim, T+1, ...)
    xp = np.moveaxis(tc.state_set.project(np.moveaxis(x_shift, 1, 0)), 0, 1)
    up = np.moveaxis(tc.input_set.project(np.moveaxis(u_shift, 1, 0)), 0, 1)
    return xp, up


def violation_metric(q: np.ndarray, bound: float = 0.5) -> float:
    """Sum of squared excursions of velocities beyond [-bound, bound].

    ``q`` holds velocity samples of any shape, e.g. (T+1, 2, S).  Points on
    the boundary count as feasible.
    """
    q = np.asarray(q, dtype=np.float64)
    below = np.where(q < -bound, (q + bound) ** 2, 0.0)
    above = np.where(q > bound, (bound - q) ** 2, 0.0)
    return float(np.sum(below) + np.sum(above))


def rollout_violation(x: np.ndarray, bound: float = 0.5) -> float:
    """V over a state batch (T+1, 4, S), velocities in rows 2 and 3."""
    return violation_metric(np.asarray(x)[:, 2:4], bound)
