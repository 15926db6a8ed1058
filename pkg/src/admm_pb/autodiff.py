"""Reverse-mode automatic differentiation on a flat tape.

A :class:`Tape` records every primitive as a node holding its operand
indices and its cached forward value.  Nodes are appended in evaluation
order, so a single reverse sweep over the list is a valid topological
traversal.  :meth:`Tape.backward` never mutates the tape; adjoints live in
a scratch list that is discarded after each call.

All values are float64 numpy arrays.  Binary elementwise ops follow numpy
broadcasting and reduce adjoints back to the operand shape.

The module-level functions (:func:`tanh`, :func:`max0`, ...) dispatch on
their argument: numpy inputs give plain numpy results, :class:`Var` inputs
record a node.  Model code written against these functions therefore runs
both as a fast forward simulation and as a differentiable graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "tanh",
    "max0",
    "square",
    "total",
    "norm_sq",
    "reciprocal",
    "spectral_norm",
    "stack",
    "concat",
    "reshape",
    "value_of",
]


@dataclass(frozen=True)
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    aux: Any = None


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")
    # let numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index}, op={node.op}, shape={self.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape._binary("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape._binary("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape._binary("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape._binary("sub", self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape._push("scale", (self.index,), self.value * float(other), float(other))
        return self.tape._binary("mul", self, self._lift(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return self.__mul__(other)
        return self.tape._binary("mul", self._lift(other), self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Var division is only defined for scalar constants; use reciprocal()")
        return self.__mul__(1.0 / float(other))

    def __neg__(self):
        return self.__mul__(-1.0)

    def __matmul__(self, other):
        return self.tape._matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape._matmul(self._lift(other), self)

    def __getitem__(self, idx):
        out = self.value[idx]
        return self.tape._push("getitem", (self.index,), np.array(out, dtype=np.float64), idx)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _vjp_matmul(g, a, b):
    if b.ndim == 1:
        ga = np.outer(g, b)
    else:
        ga = g @ np.swapaxes(b, -1, -2)
        while ga.ndim > 2:
            ga = ga.sum(axis=0)
    return ga, a.T @ g


# Each rule maps (adjoint, node, operand values) to operand adjoints.
_VJP: dict[str, Callable[..., tuple[np.ndarray, ...]]] = {
    "add": lambda g, n, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda g, n, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "mul": lambda g, n, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "scale": lambda g, n, a: (g * n.aux,),
    "matmul": lambda g, n, a, b: _vjp_matmul(g, a, b),
    "tanh": lambda g, n, a: (g * (1.0 - n.value * n.value),),
    "square": lambda g, n, a: (2.0 * g * a,),
    # subgradient 0 at the kink keeps satisfied hinges inactive
    "max0": lambda g, n, a: (g * (a > 0.0),),
    "sum": lambda g, n, a: (np.full(a.shape, g),),
    "norm_sq": lambda g, n, a: (2.0 * g * a,),
    "reciprocal": lambda g, n, a: (-g * n.value * n.value,),
    "spectral_norm": lambda g, n, a: (g * n.aux,),
    "reshape": lambda g, n, a: (g.reshape(a.shape),),
}


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: tuple[int, ...], value, aux=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(
                f"non-finite forward value at tape node {len(self.nodes)} (op={op!r}, "
                f"operands={list(inputs)})"
            )
        self.nodes.append(_Node(op, inputs, value, aux))
        return Var(self, len(self.nodes) - 1)

    def param(self, value) -> Var:
        """Register a differentiable leaf.  Gradients come back in registration order."""
        var = self._push("param", (), np.array(value, dtype=np.float64))
        self.params.append(var.index)
        return var

    def const(self, value) -> Var:
        return self._push("const", (), np.array(value, dtype=np.float64))

    def _binary(self, op: str, a: Var, b: Var) -> Var:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ValueError(f"shape mismatch in {op}: {a.shape} vs {b.shape}") from None
        va, vb = a.value, b.value
        out = va + vb if op == "add" else va - vb if op == "sub" else va * vb
        return self._push(op, (a.index, b.index), out)

    def _matmul(self, a: Var, b: Var) -> Var:
        if a.ndim != 2:
            raise ValueError(f"matmul expects a 2-D left operand, got shape {a.shape}")
        inner = b.shape[0] if b.ndim == 1 else b.shape[-2]
        if a.shape[1] != inner:
            raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
        return self._push("matmul", (a.index, b.index), a.value @ b.value)

    def _check(self, var: Var) -> None:
        if not isinstance(var, Var) or var.tape is not self:
            raise ValueError("variable is not on this tape")

    def forward(self, expr: Var) -> float:
        self._check(expr)
        if expr.value.shape != ():
            raise ValueError(f"expected a scalar expression, got shape {expr.shape}")
        return float(expr.value)

    def backward(self, loss: Var, wrt: Sequence[Var] | None = None) -> np.ndarray:
        """Gradient of scalar ``loss`` w.r.t. ``wrt`` (default: all params), flattened."""
        self.forward(loss)
        if wrt is None:
            targets = list(self.params)
        else:
            targets = []
            for v in wrt:
                self._check(v)
                if v.index not in self.params:
                    raise ValueError(f"{v!r} is not a registered parameter")
                targets.append(v.index)

        nodes = self.nodes
        adj: list[np.ndarray | None] = [None] * (loss.index + 1)
        adj[loss.index] = np.ones((), dtype=np.float64)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if not node.inputs:
                continue
            if node.op == "getitem":
                src = nodes[node.inputs[0]].value
                grads = (np.zeros_like(src),)
                grads[0][node.aux] += g
            elif node.op == "stack":
                grads = tuple(g[k] for k in range(len(node.inputs)))
            elif node.op == "concat":
                grads = tuple(np.split(g, node.aux[:-1], axis=0))
            else:
                grads = _VJP[node.op](g, node, *(nodes[j].value for j in node.inputs))
            for j, gj in zip(node.inputs, grads):
                if nodes[j].op == "const":
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj

        parts = []
        for idx in targets:
            g = adj[idx] if idx < len(adj) else None
            shape = nodes[idx].value.shape
            parts.append(np.zeros(shape).ravel() if g is None else np.asarray(g).reshape(shape).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value_of(x) -> np.ndarray:
    """Forward value of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unary(op: str, fn: Callable[[np.ndarray], np.ndarray], x, aux=None):
    if isinstance(x, Var):
        # the tape reports non-finite values itself
        with np.errstate(all="ignore"):
            value = fn(x.value)
        return x.tape._push(op, (x.index,), value, aux)
    return fn(np.asarray(x, dtype=np.float64))


def tanh(x):
    return _unary("tanh", np.tanh, x)


def max0(x):
    """Elementwise max{0, x}."""
    return _unary("max0", lambda v: np.maximum(v, 0.0), x)


def square(x):
    return _unary("square", np.square, x)


def total(x):
    """Sum of all entries."""
    return _unary("sum", lambda v: np.asarray(v.sum()), x)


def norm_sq(x):
    return _unary("norm_sq", lambda v: np.asarray(np.vdot(v, v)), x)


def reciprocal(x):
    return _unary("reciprocal", lambda v: 1.0 / v, x)


def reshape(x, shape):
    return _unary("reshape", lambda v: v.reshape(shape), x)


def spectral_norm(x):
    """Largest singular value of a matrix; gradient is u1 v1^T."""
    if not isinstance(x, Var):
        return np.asarray(np.linalg.norm(np.asarray(x, dtype=np.float64), 2))
    u, s, vt = np.linalg.svd(x.value)
    return x.tape._push("spectral_norm", (x.index,), np.asarray(s[0]), np.outer(u[:, 0], vt[0]))


def _gather(op: str, items: Sequence, combine: Callable, aux_fn=None):
    tape = _tape_of(*items)
    values = [value_of(v) for v in items]
    if tape is None:
        return combine(values)
    vars_ = [v if isinstance(v, Var) else tape.const(v) for v in items]
    for v in vars_:
        tape._check(v)
    aux = aux_fn(values) if aux_fn else None
    return tape._push(op, tuple(v.index for v in vars_), combine(values), aux)


def stack(items: Sequence):
    """Stack equally shaped operands along a new leading axis."""
    return _gather("stack", items, np.stack)


def concat(items: Sequence):
    """Concatenate operands along axis 0."""
    return _gather(
        "concat",
        items,
        lambda vs: np.concatenate(vs, axis=0),
        lambda vs: list(np.cumsum([v.shape[0] for v in vs])),
    )
