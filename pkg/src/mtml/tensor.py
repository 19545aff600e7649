"""Minimal dense tensor with reverse-mode automatic differentiation.

Every tensor holds a C-contiguous float64 array. Operations record their
parents and a closure that maps the output gradient to parent gradients;
``backward`` walks the recorded graph once in reverse topological order.
The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn, op: str) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    out.data = data if data.flags.c_contiguous else data.copy(order="C")
    out.requires_grad = needs
    out.grad = None
    out.op = op
    out._parents = parents if needs else ()
    out._backward = fn if needs else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), fn, "matmul")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(a, float(b))
    if _is_scalar(a):
        return shift(b, float(a))
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(a, -float(b))
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, float(b))
    if _is_scalar(a):
        return scale(b, float(a))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, 1.0 / float(b))
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "shift")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = (a.data > 0.0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: input must be strictly positive")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of the residual ``a``."""
    r = a.data
    small = np.abs(r) <= delta
    out = np.where(small, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    dr = np.where(small, r, delta * np.sign(r))
    return _make(out, (a,), lambda g: (g * dr,), "huber")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": absolute,
    "scale": scale,
    "shift": shift,
    "huber": huber,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _check_axis(t: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not (0 <= axis < t.data.ndim):
        raise DimensionError(f"axis {axis} out of range for rank {t.data.ndim}")


def reduce_sum(t: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    _check_axis(t, axis)
    shape = t.shape
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (t,), fn, "sum")


def reduce_mean(t: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    _check_axis(t, axis)
    n = t.data.size if axis is None else t.shape[axis]
    return scale(reduce_sum(t, axis, keepdims), 1.0 / n)


def reduce(op: str, t: Tensor, axis: Optional[int] = None) -> Tensor:
    if op == "sum":
        return reduce_sum(t, axis)
    if op == "mean":
        return reduce_mean(t, axis)
    raise ValueError(f"unknown reduction {op!r}")


def broadcast_to(t: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); gradient sums over the expanded axes."""
    shape = tuple(shape)
    src = t.shape
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)
    expanded = tuple(i for i in range(len(shape)) if i < lead or src[i - lead] == 1 and shape[i] != 1)

    def fn(g):
        s = g.sum(axis=expanded, keepdims=True) if expanded else g
        return (s.reshape(src),)

    return _make(out, (t,), fn, "broadcast")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    src = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (t,), lambda g: (g.reshape(src),), "reshape")


def logsumexp(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp along one axis (axis removed)."""
    ax = axis % t.data.ndim
    x = t.data
    m = x.max(axis=ax, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    soft = e / s
    return _make(out, (t,), lambda g: (np.expand_dims(g, ax) * soft,), "logsumexp")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = matmul(x, w)
    return add(y, broadcast_to(b, y.shape))


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
