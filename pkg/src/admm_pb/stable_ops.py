"""Contractive recurrent operator used as the learnable boosting policy.

The operator maps a disturbance sequence ``w`` to an input sequence ``u``::

    s_{t+1} = A s_t + tanh((1 + b) * (B w_t))
    u_t     = C s_t + D w_t,          s_0 = 0

with ``A = kappa * Abar / max(1, 1.05 * ||Abar||_2)``.  Whatever the raw
parameters, ``||A||_2 <= kappa < 1`` and tanh is 1-Lipschitz, so the map has
a finite l2 gain (see :func:`gain_bound`).  The bias is gated by the input
path so that a zero disturbance gives a zero output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

SIGMA_SAFETY = 1.05
LAYOUT_VERSION = 1
_NAMES = ("Abar", "B", "C", "D", "b")


@dataclass(frozen=True)
class OperatorDims:
    n_in: int = 4
    n_state: int = 4
    n_out: int = 2

    def shapes(self) -> dict[str, tuple[int, ...]]:
        ni, ns, no = self.n_in, self.n_state, self.n_out
        return {"Abar": (ns, ns), "B": (ns, ni), "C": (no, ns), "D": (no, ni), "b": (ns,)}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            out[name] = (start, start + size)
            start += size
        return out


def unflatten(theta: np.ndarray, dims: OperatorDims) -> dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (dims.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({dims.n_params},)")
    shapes = dims.shapes()
    return {k: theta[a:b].reshape(shapes[k]) for k, (a, b) in dims.offsets().items()}


def flatten(mats: dict[str, np.ndarray], dims: OperatorDims) -> np.ndarray:
    return np.concatenate([np.asarray(mats[k], dtype=np.float64).ravel() for k in dims.shapes()])


def init_params(dims: OperatorDims, std: float = 0.1, seed=None) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    rng = np.random.default_rng(seed)
    return std * rng.standard_normal(dims.n_params)


@dataclass(frozen=True)
class Effective:
    """Effective matrices of one operator instance (numpy arrays or tape Vars)."""

    A: object
    B: object
    C: object
    D: object
    b: object
    b_col: object
    prescale: float


@dataclass(frozen=True)
class ContractiveOperator:
    dims: OperatorDims
    theta: np.ndarray
    kappa: float = 0.95
    prescale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if self.prescale <= 0:
            raise ValueError("prescale must be positive")
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.dims.n_params,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.dims.n_params},)")
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta) -> "ContractiveOperator":
        return ContractiveOperator(self.dims, theta, self.kappa, self.prescale)

    def effective(self, tape: ad.Tape | None = None) -> Effective:
        """Effective matrices; with a tape, the raw blocks become registered params."""
        raw = unflatten(self.theta, self.dims)
        if tape is not None:
            raw = {k: tape.param(raw[k]) for k in _NAMES}
        return effective_from_raw(raw, self.kappa, self.prescale)

    def gain_bound(self) -> float:
        return gain_bound(self)


def effective_from_raw(raw: dict, kappa: float, prescale: float = 1.0) -> Effective:
    sigma = SIGMA_SAFETY * ad.spectral_norm(raw["Abar"])
    # kappa / max(1, sigma)
    scale = kappa * ad.reciprocal(1.0 + ad.max0(sigma - 1.0))
    A = raw["Abar"] * scale
    b = raw["b"]
    b_col = ad.reshape(b, (-1, 1))
    return Effective(A, raw["B"], raw["C"], raw["D"], b, b_col, prescale)


def step(eff: Effective, state, w):
    """One operator step; ``w`` is (n_in,) or a scenario batch (n_in, S)."""
    if eff.prescale != 1.0:
        w = w * eff.prescale
    Bw = eff.B @ w
    gate = eff.b_col if ad.value_of(Bw).ndim == 2 else eff.b
    u = eff.C @ state + eff.D @ w
    next_state = eff.A @ state + ad.tanh(Bw + gate * Bw)
    return next_state, u


def simulate(op: ContractiveOperator, w_seq: np.ndarray) -> np.ndarray:
    """Outputs for a disturbance sequence of shape (T+1, n_in[, S])."""
    eff = op.effective()
    w_seq = np.asarray(w_seq, dtype=np.float64)
    state = np.zeros((op.dims.n_state,) + w_seq.shape[2:])
    outs = []
    for w in w_seq:
        state, u = step(eff, state, w)
        outs.append(u)
    return np.stack(outs)


def gain_bound(op: ContractiveOperator) -> float:
    """A-priori l2 gain bound ||D|| + ||C|| ||B|| (1 + ||b||_inf) / (1 - kappa)."""
    eff = op.effective()
    nrm = lambda M: float(np.linalg.norm(M, 2))
    bias = 1.0 + float(np.max(np.abs(eff.b))) if eff.b.size else 1.0
    gamma = nrm(eff.D) + nrm(eff.C) * nrm(eff.B) * bias / (1.0 - op.kappa)
    return op.prescale * gamma


def save_checkpoint(path, op: ContractiveOperator, seed=None, extra: dict | None = None) -> None:
    """JSON header line followed by the raw little-endian float64 parameter vector."""
    header = {
        "layout_version": LAYOUT_VERSION,
        "dims": asdict(op.dims),
        "kappa": op.kappa,
        "prescale": op.prescale,
        "seed": seed,
        "n_params": op.dims.n_params,
    }
    if extra:
        header.update(extra)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(op.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ContractiveOperator, dict]:
    with Path(path).open("rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    if header.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported checkpoint layout {header.get('layout_version')!r}")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"]:
        raise ValueError("checkpoint payload size does not match its header")
    op = ContractiveOperator(OperatorDims(**header["dims"]), theta, header["kappa"], header["prescale"])
    return op, header
