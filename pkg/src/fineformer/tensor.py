"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive below computes its forward value with numpy and, when any
input requires a gradient, records a closure that maps the output adjoint to
the input adjoints. ``Tensor.backward`` replays those closures in reverse
execution order.

Broadcasting is deliberately narrow: ``add_broadcast``/``mul_broadcast``
accept a second operand whose shape equals the trailing dimensions of the
first (a bias row, or a positional table added to every sequence of a batch).
Everything else requires equal shapes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_default_dtype = np.dtype(np.float64)
_op_counter = itertools.count()

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly constructed tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Leaves are created by the constructor; every other tensor is the output
    of a primitive and remembers its parents plus an adjoint closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_adjoint", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        if other.shape == self.shape:
            return add(self, other)
        return add_broadcast(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other) if other.shape == self.shape else mul_broadcast(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``.

        ``self`` must be a 0-d tensor. Gradients are added to existing
        buffers, so call ``zero_grad`` between independent passes.
        """
        if self.data.ndim != 0:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor with requires_grad=True")

        if self._adjoint is None:
            self._accumulate(np.ones_like(self.data))
            return
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in trace(self):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            for parent, pg in zip(node._parents, node._adjoint(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._adjoint is None:
                    parent._accumulate(pg)
                else:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


def trace(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, latest first.

    This is the computation record that ``backward`` replays: each operation
    appears exactly once, ordered by decreasing execution sequence number.
    """
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._adjoint is None or id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def _record(data: np.ndarray, parents: tuple[Tensor, ...], adjoint) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._adjoint = adjoint
        out._seq = next(_op_counter)
    else:
        out._parents = ()
        out._adjoint = None
        out._seq = -1
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _trailing(op: str, x: Tensor, y: Tensor) -> None:
    if y.ndim > x.ndim or x.shape[x.ndim - y.ndim:] != y.shape:
        raise ShapeError(f"{op}: shape {y.shape} is not a trailing block of {x.shape}")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def add_broadcast(x: Tensor, y: Tensor) -> Tensor:
    """``x + y`` where ``y`` matches the trailing dimensions of ``x``."""
    _trailing("add_broadcast", x, y)

    def adjoint(g):
        return g, g.reshape((-1,) + y.shape).sum(axis=0)

    return _record(x.data + y.data, (x, y), adjoint)


def mul_broadcast(x: Tensor, y: Tensor) -> Tensor:
    _trailing("mul_broadcast", x, y)

    def adjoint(g):
        return g * y.data, (g * x.data).reshape((-1,) + y.shape).sum(axis=0)

    return _record(x.data * y.data, (x, y), adjoint)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _record((x.data * cdf).astype(x.dtype), (x,), lambda g: (g * (cdf + x.data * pdf),))


# -- linear algebra and reductions --------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either ``(k, n)`` (shared across the
    leading axes of ``a``) or ``(..., k, n)`` with identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ")

    def adjoint(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(a.data @ b.data, (a, b), adjoint)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (x,), adjoint)


def standardize(x: Tensor, eps: float) -> Tensor:
    """Zero-mean, unit-variance rows over the last axis (variance + eps)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def adjoint(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    return _record(xhat, (x,), adjoint)


def mean(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis (the axis is removed)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    n = x.shape[axis]

    def adjoint(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape),)

    return _record(x.data.mean(axis=axis), (x,), adjoint)


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


# -- shape manipulation -------------------------------------------------

def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    axis %= ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, adjoint)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    axis %= x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {stop}) outside axis {axis} of {x.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def adjoint(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(x.data[index], (x,), adjoint)


def take(table: Tensor, ids) -> Tensor:
    """Rows of a 2-D ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take: ids must lie in [0, {table.shape[0]})")

    def adjoint(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(table.data[ids], (table,), adjoint)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    data = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _record(data, (x,), lambda g: (g.sum(axis=0),))

