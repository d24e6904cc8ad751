"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is an append-only record of operations.  Leaves are created
with :meth:`Tape.variable`; every operation on taped tensors appends a node
whose id is larger than the ids of its inputs, so the node list is already in
topological order and :meth:`Tape.backward` is a single reverse sweep.

Tensors are immutable (their buffers are read-only).  Plain numbers and
arrays mix freely with taped tensors and are treated as constants.

    >>> tape = Tape()
    >>> x = tape.variable([[3.0]])
    >>> grads = tape.backward(x * x)
    >>> float(grads[x][0, 0])
    6.0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, DomainError, NumericalError, UsageError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "matmul",
    "add",
    "sub",
    "mul",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "maximum",
    "power",
    "reduce_sum",
    "reduce_max",
    "logsumexp",
    "backward",
]


def _as_2d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got an array of shape {arr.shape}")
    view = arr.view()
    view.flags.writeable = False
    return view


class Tensor:
    """Immutable row-major 2-D array of 64-bit floats, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = _as_2d(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)


@dataclass
class _Node:
    op: str
    inputs: tuple[Optional[int], ...]
    value: np.ndarray
    vjp: Optional[VJP]


class Gradients:
    """Adjoints produced by one backward sweep, indexed by tensor."""

    def __init__(self, tape: "Tape", adjoints: dict[int, np.ndarray]):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            raise KeyError("tensor is not recorded on this tape")
        g = self._adjoints.get(t.node)
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self._tape and t.node in self._adjoints

    def __len__(self) -> int:
        return len(self._adjoints)


class Tape:
    """Append-only operation record. Not thread-safe; use one tape per thread."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, data) -> Tensor:
        value = _as_2d(data)
        self.nodes.append(_Node("leaf", (), value, None))
        return Tensor(value, self, len(self.nodes) - 1)

    def _record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        self.nodes.append(_Node(op, tuple(t.node if t.tape is self else None for t in inputs), value, vjp))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> Gradients:
        if root.tape is not self or root.node is None:
            raise UsageError("backward() root must be recorded on this tape")
        if root.shape != (1, 1):
            raise UsageError(f"backward() needs a scalar (1x1) root, got shape {root.shape}")
        adjoints: dict[int, np.ndarray] = {root.node: np.ones((1, 1))}
        for nid in range(root.node, -1, -1):
            adj = adjoints.get(nid)
            node = self.nodes[nid]
            if adj is None or node.vjp is None:
                continue
            for src, g in zip(node.inputs, node.vjp(adj)):
                if src is None or g is None:
                    continue
                prev = adjoints.get(src)
                adjoints[src] = g if prev is None else prev + g
        return Gradients(self, adjoints)


def backward(root: Tensor) -> Gradients:
    if root.tape is None:
        raise UsageError("backward() root is a constant; nothing was recorded")
    return root.tape.backward(root)


def _lift(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Optional[Tape]:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise UsageError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NumericalError(f"{op} produced a non-finite value")
    return value


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    _finite(value, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(op, inputs, value, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# binary ops


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.data, b.data
    need_a, need_b = a.tape is not None, b.tape is not None

    def vjp(g):
        return (g @ bv.T if need_a else None, av.T @ g if need_b else None)

    return _emit("matmul", (a, b), av @ bv, vjp)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.data, b.data
    return _emit(
        "mul",
        (a, b),
        av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


# unary ops


def exp(a: ArrayLike) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = _lift(a)
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive entry")
    av = a.data
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


def relu(a: ArrayLike) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = _stable_sigmoid(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def maximum(a: ArrayLike, c: float) -> Tensor:
    """Elementwise max(a, c) against a scalar; the derivative at a tie is 0."""
    a = _lift(a)
    mask = a.data > c
    return _emit("maximum", (a,), np.where(mask, a.data, float(c)), lambda g: (g * mask,))


def power(a: ArrayLike, p: float) -> Tensor:
    a = _lift(a)
    av = a.data
    if p != int(p) and (av <= 0).any():
        raise DomainError("fractional power of a non-positive entry")
    return _emit("power", (a,), av**p, lambda g: (g * p * av ** (p - 1),))


# reductions


def _check_axis(op: str, a: Tensor, axis: Optional[int]) -> None:
    if axis not in (None, 0, 1):
        raise DimensionError(f"{op}: axis must be 0, 1 or None, got {axis}")
    if a.data.size == 0:
        raise DomainError(f"{op}: empty reduction")


def reduce_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = _lift(a)
    _check_axis("sum", a, axis)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=True).reshape(_reduced(shape, axis))
    return _emit("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def _reduced(shape: tuple[int, int], axis: Optional[int]) -> tuple[int, int]:
    if axis is None:
        return (1, 1)
    return (1, shape[1]) if axis == 0 else (shape[0], 1)


def reduce_max(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    """Max reduction; the gradient flows to the first maximiser in row-major order."""
    a = _lift(a)
    _check_axis("max", a, axis)
    av = a.data
    mask = np.zeros(av.shape)
    if axis is None:
        mask.flat[np.argmax(av)] = 1.0
    elif axis == 0:
        mask[np.argmax(av, axis=0), np.arange(av.shape[1])] = 1.0
    else:
        mask[np.arange(av.shape[0]), np.argmax(av, axis=1)] = 1.0
    out = av.max(axis=axis, keepdims=True).reshape(_reduced(av.shape, axis))
    return _emit("max", (a,), out, lambda g: (g * mask,))


def logsumexp(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = _lift(a)
    _check_axis("logsumexp", a, axis)
    av = a.data
    shift = av.max(axis=axis, keepdims=True)
    e = np.exp(av - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = (shift + np.log(s)).reshape(_reduced(av.shape, axis))
    soft = e / s
    return _emit("logsumexp", (a,), out, lambda g: (g * soft,))
