"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require a
gradient record a node holding the parents and a vector-Jacobian product.
Every node gets a sequence number at creation, so sorting the nodes reachable
from a scalar by that number yields a topological order for free; the
:class:`Tape` is exactly that sorted list.

``stop_gradient`` returns a tensor with identical values and no history,
which is how loss terms route their gradients to a single parameter group.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericDomainError

LOG_FLOOR = 1e-20

_sequence = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_seq")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._seq = next(_sequence)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{grad})"

    # identity hashing; == is deliberately not overloaded
    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never receives gradient."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def stop_gradient(a: Tensor) -> Tensor:
    """Same values (same buffer), no history: ancestors get zero gradient."""
    return Tensor(as_tensor(a).data)


def _record(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---- binary elementwise -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


# ---- unary elementwise --------------------------------------------------

def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def log(a) -> Tensor:
    """Natural log with inputs in ``[0, LOG_FLOOR)`` raised to the floor."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise NumericDomainError("log: negative or NaN input")
    live = x >= LOG_FLOOR
    safe = np.where(live, x, LOG_FLOOR)
    return _record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(np.logaddexp(0.0, x), (a,), lambda g: (g * np.exp(-np.logaddexp(0.0, -x)),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only where the input lies inside ``[lo, hi]``."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "square": square, "log": log,
    "exp": exp, "tanh": tanh, "relu": relu,
}


def elementwise(a, op: str, b=None, c: float | None = None) -> Tensor:
    """Dispatch by name; ``scale`` takes ``c``, binary ops take ``b``."""
    if op == "scale":
        return scale(a, c)
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a, b) if op in ("add", "sub", "mul") else fn(a)


# ---- linear algebra and structure ---------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def split_rows(a, n: int) -> tuple[Tensor, Tensor]:
    """Split into the first ``n`` rows and the rest."""
    a = as_tensor(a)
    top = _record(a.data[:n], (a,), lambda g: (np.concatenate([g, np.zeros_like(a.data[n:])]),))
    bottom = _record(a.data[n:], (a,), lambda g: (np.concatenate([np.zeros_like(a.data[:n]), g]),))
    return top, bottom


def tile_rows(a, k: int) -> Tensor:
    """Stack ``k`` copies of a 2-D tensor vertically."""
    a = as_tensor(a)
    n = a.shape[0]
    return _record(np.tile(a.data, (k, 1)), (a,),
                   lambda g: (g.reshape(k, n, *a.shape[1:]).sum(axis=0),))


# ---- reductions ---------------------------------------------------------

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        return _record(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return _record(np.sum(a.data, axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        return scale(sum(a, axis), 0.0)
    return scale(sum(a, axis), 1.0 / count)


def sum_sq_rows(a) -> Tensor:
    """Per-row squared Euclidean norm of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"sum_sq_rows expects a 2-D tensor, got shape {a.shape}")
    x = a.data
    return _record(np.einsum("ij,ij->i", x, x), (a,), lambda g: (2.0 * x * g[:, None],))


def reduce(a, op: str, axis: int | None = None) -> Tensor:
    if op == "sum":
        return sum(a, axis)
    if op == "mean":
        return mean(a, axis)
    if op == "sum_sq_rows":
        return sum_sq_rows(a)
    raise ValueError(f"unknown reduction {op!r}")


# ---- backward -----------------------------------------------------------

class Tape:
    """Operation nodes reachable from ``output``, in recorded order."""

    def __init__(self, output: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        self.output = output
        self.nodes = sorted(seen.values(), key=lambda t: t._seq)

    def __len__(self):
        return len(self.nodes)

    def backward(self) -> dict[int, np.ndarray]:
        """Adjoints keyed by ``id(tensor)`` for every node on the tape."""
        out = self.output
        grads: dict[int, np.ndarray] = {}
        if out.requires_grad:
            grads[id(out)] = np.ones_like(out.data)
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        return grads


def backward(scalar: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradient of ``scalar`` w.r.t. each of ``params``.

    Parameters the scalar does not depend on get an exact zero array.
    """
    scalar = as_tensor(scalar)
    if scalar.size != 1:
        raise ContractError(f"backward needs a single-element tensor, got shape {scalar.shape}")
    grads = Tape(scalar).backward()
    result = []
    for p in params:
        g = grads.get(id(p))
        result.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape))
    return result
