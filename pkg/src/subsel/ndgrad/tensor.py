"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded when any of
their inputs is a parameter (``requires_grad=True``) or an earlier recorded
output. Outside a tape the same functions just compute values.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from ..errors import ContractError, DomainError, NumericError, ShapeError

_local = threading.local()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.records: list[Record] = []
        # outputs point back through a weak reference: a strong one would make
        # tape <-> tensor cycles that hold large arrays until the cyclic GC runs
        self.ref = weakref.ref(self)

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording, even inside an enclosing tape."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape.ref


def _emit(op: str, inputs: tuple, value: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tape = None
    tape = current_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._tape = tape.ref
        tape.records.append(Record(op, inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every parameter on the tape."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        loss.grad += 1.0
        return
    if loss._tape is not tape.ref:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not _tracked(inp, tape):
                continue
            if inp.requires_grad:
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", (a, b), a.value + b.value,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value,
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", (a, b), a.value * b.value,
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.value * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.value @ b.value,
                 lambda g: (g @ b.value.T, a.value.T @ g))


def spmm(a: sp.spmatrix, b) -> Tensor:
    """Constant sparse matrix times dense tensor; only ``b`` receives gradient."""
    b = as_tensor(b)
    if not sp.issparse(a):
        raise TypeError("spmm expects a scipy sparse matrix as the left operand")
    if b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {a.shape} by {b.shape}")
    return _emit("spmm", (b,), np.asarray(a @ b.value), lambda g: (np.asarray(a.T @ g),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _emit("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive input")
    x = a.value
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return _emit("exp", (a,), e, lambda g: (g * e,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of no tensors")
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", ts, value, vjp)


def gather(a, index) -> Tensor:
    """Row gather ``a[index]`` along the first axis."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for {a.shape[0]} rows")
    n = a.shape[0]

    def vjp(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(len(flat), -1)
        out = np.zeros((n, g2.shape[1]))
        np.add.at(out, flat, g2)
        return (out.reshape(a.shape),)

    return _emit("gather", (a,), a.value[idx], vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _emit("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    value = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), value, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, tau: float = 1.0) -> Tensor:
    """Softmax of ``a / tau`` over the last axis (max-shifted)."""
    a = as_tensor(a)
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    z = a.value / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((s * (g - (g * s).sum(axis=-1, keepdims=True))) / tau,)

    return _emit("softmax", (a,), s, vjp)
