"""Dense arrays with define-by-run reverse-mode differentiation.

Every operation builds a node holding its parents and a local backward rule.
Gradients flow to any tensor created with ``requires_grad=True``; input
gradients (used by the attacks) and parameter gradients share the same path.

Broadcasting is deliberately narrow: equal shapes, a scalar with a tensor, or
a 1-D bias vector over the trailing axis of a matrix.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "tensor",
    "backward",
    "grad",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs",
    "exp",
    "log",
    "tanh",
    "sum",
    "mean",
    "maximum",
    "minimum",
    "clip",
    "matmul",
    "reshape",
    "pick",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for Python scalars and lists."""
    st = _st()
    old = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=get_default_dtype())


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients.

    ``grad`` is populated only on leaves (tensors not produced by an
    operation) and accumulates across calls to :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- construction ---------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return abs(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs(self)

    def backward(self, seed=None) -> None:
        backward(self, seed)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


# -- broadcasting --------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = _lift(a)
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    if a.shape == b.shape or a.size == 1 and a.ndim <= b.ndim or b.size == 1 and b.ndim <= a.ndim:
        return a, b
    # row bias: 1-D vector matching the trailing axis
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return a, b
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return a, b
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim >= 2 and g.shape[-1] == shape[0] and int(np.prod(shape)) != 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_reduce_to(g, sa) if needs[0] else None, _reduce_to(g, sb) if needs[1] else None)

    return Tensor._make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_reduce_to(g, sa) if needs[0] else None, _reduce_to(-g, sb) if needs[1] else None)

    return Tensor._make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (
            _reduce_to(g * bd, ad.shape) if needs[0] else None,
            _reduce_to(g * ad, bd.shape) if needs[1] else None,
        )

    return Tensor._make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _check_finite(ad / bd, "div")

    def bw(g, needs):
        ga = _reduce_to(g / bd, ad.shape) if needs[0] else None
        gb = _reduce_to(-g * out / bd, bd.shape) if needs[1] else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(-a.data, (a,), lambda g, needs: (-g,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors the numpy name
    """Absolute value; the subgradient at zero is taken as 0."""
    a = _lift(a)
    s = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g, needs: (g * s,))


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")
    return Tensor._make(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g, needs: (g / ad,))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g, needs: (g * (1 - out * out),))


def maximum(a, b) -> Tensor:
    """Elementwise maximum. On ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    take_a = ad >= bd

    def bw(g, needs):
        return (
            _reduce_to(np.where(take_a, g, 0), ad.shape) if needs[0] else None,
            _reduce_to(np.where(take_a, 0, g), bd.shape) if needs[1] else None,
        )

    return Tensor._make(np.maximum(ad, bd), (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise minimum. On ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    take_a = ad <= bd

    def bw(g, needs):
        return (
            _reduce_to(np.where(take_a, g, 0), ad.shape) if needs[0] else None,
            _reduce_to(np.where(take_a, 0, g), bd.shape) if needs[1] else None,
        )

    return Tensor._make(np.minimum(ad, bd), (a, b), bw)


def clip(a, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; bounds may be arrays of ``a``'s shape (not tracked)."""
    a = _lift(a)
    lo = np.asarray(lo.data if isinstance(lo, Tensor) else lo, dtype=a.dtype)
    hi = np.asarray(hi.data if isinstance(hi, Tensor) else hi, dtype=a.dtype)
    out = np.minimum(np.maximum(a.data, lo), hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(out, (a,), lambda g, needs: (g * inside,))


# -- reductions and shape ------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._make(out, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return div(sum(a, axis), n)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def pick(a, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[b] = a[b, index[b]]`` for a 2-D ``a``."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError("pick expects a 2-D tensor")
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise ShapeError(f"index of shape {index.shape} for {a.shape[0]} rows")
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.dtype

    def bw(g, needs):
        full = np.zeros(shape, dtype=dtype)
        full[rows, index] = g
        return (full,)

    return Tensor._make(a.data[rows, index], (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return Tensor._make(ad @ bd, (a, b), bw)


# -- reverse pass --------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: np.ndarray, targets: Optional[set], on_target: Callable) -> None:
    order = _toposort(root)
    relevant = {}
    for node in order:
        if node.is_leaf:
            relevant[id(node)] = targets is None or id(node) in targets
        else:
            relevant[id(node)] = (targets is not None and id(node) in targets) or any(
                relevant.get(id(p), False) for p in node._parents
            )
    grads = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or (targets is not None and id(node) in targets):
            on_target(node, g)
        if node.is_leaf:
            continue
        needs = tuple(p.requires_grad and relevant.get(id(p), False) for p in node._parents)
        if not any(needs):
            continue
        for p, pg, need in zip(node._parents, node._backward(g, needs), needs):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if seed is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = _as_array(seed, loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return

    def deliver(node, g):
        if not node.is_leaf:
            return
        g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
        if node.grad is None:
            node.grad = Tensor(g.copy())
        else:
            node.grad = Tensor(node.grad.data + g)

    _propagate(loss, seed, None, deliver)


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs`` as arrays.

    Does not touch ``.grad`` and only walks the part of the graph that leads
    to ``inputs``; unreachable inputs get zeros.
    """
    inputs = list(inputs)
    if loss.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    out = {id(t): None for t in inputs}
    if loss.requires_grad:
        def collect(node, g):
            if id(node) in out:
                prev = out[id(node)]
                out[id(node)] = g if prev is None else prev + g

        _propagate(loss, np.ones_like(loss.data), set(out), collect)
    return [
        np.zeros_like(t.data) if out[id(t)] is None else np.asarray(out[id(t)], dtype=t.dtype).reshape(t.shape)
        for t in inputs
    ]
