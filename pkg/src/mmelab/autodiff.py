"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints. :func:`backward` sorts
the reachable graph into a :class:`Tape` and walks it once in reverse.

Broadcasting is deliberately narrow: operands must have identical shapes, or
one of them must be a scalar. Row-wise bias addition has its own op.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

EPS_NORM = 1e-12
EPS_LOG = 1e-12

_ids = itertools.count()


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` across
    backward calls until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.tape_id = next(_ids)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not identical and neither is scalar")


def _unbroadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if _is_scalar(target) and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` of length n to every row of ``x`` (m x n)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")

    def bw(g):
        return g, g.sum(axis=0)

    return _make(x.data + b.data, (x, b), bw, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor) -> Tensor:
    """Natural log with the input clamped below at ``EPS_LOG``."""
    live = x.data > EPS_LOG
    clamped = np.where(live, x.data, EPS_LOG)

    def bw(g):
        return (np.where(live, g / clamped, 0.0),)

    return _make(np.log(clamped), (x,), bw, "log")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = x.shape
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "reduce_sum")
    ax = axis % x.data.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), bw, "reduce_sum")


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "reduce_mean")


# -- linear algebra and row-wise maps --------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T.copy(),), "transpose")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: {a.shape} and {b.shape}")
    na = a.shape[0]
    return _make(np.vstack([a.data, b.data]), (a, b), lambda g: (g[:na], g[na:]), "concat_rows")


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]

    def bw(g):
        full = np.zeros((n,) + g.shape[1:])
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "take_rows")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit norm.

    The norm is clamped below at ``EPS_NORM`` so a zero vector maps to zero.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = norm > EPS_NORM
    denom = np.where(live, norm, EPS_NORM)
    y = x.data / denom

    def bw(g):
        radial = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - y * radial) / denom, g / EPS_NORM),)

    return _make(y, (x,), bw, "l2_normalize")


def softmax(z: Tensor) -> Tensor:
    """Softmax along the last axis, computed after max-subtraction."""
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (z,), bw, "softmax")


def grad_reverse(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale`` on the way back."""
    if not scale > 0:
        raise ContractError(f"grad_reverse scale must be positive, got {scale}")
    neg = -float(scale)
    return _make(x.data.copy(), (x,), lambda g: (neg * g,), "grad_reverse")


# -- backward -----------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a root; inputs precede outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.tape_id in seen:
                continue
            seen.add(node.tape_id)
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and p.tape_id not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Returns the tape that was traversed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if not loss.requires_grad:
        return tape
    adjoints: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(node.tape_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adjoints.get(parent.tape_id)
            adjoints[parent.tape_id] = pg if prev is None else prev + pg
    return tape


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
