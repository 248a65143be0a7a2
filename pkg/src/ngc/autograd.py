"""Dense float64 tensors with reverse-mode differentiation.

Each op computes its forward value with numpy and, when any parent needs a
gradient, records a closure that pushes the output gradient back to the
parents. ``Tensor.backward`` walks the graph once in reverse topological
order. Gradients accumulate across calls until ``zero_grad``.

Broadcasting is limited on purpose: binary ops accept equal shapes, a
0-d scalar, or a 1-d vector matching the last dimension (a row bias).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operand outside an op's domain (log of a nonpositive value, ...)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    # -- graph ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar.

        Gradients add onto whatever is already stored; call ``zero_grad`` on
        the parameters between steps.
        """
        if self.values.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _operand_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0)


# -- elementwise binary ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _operand_kind(a.values, b.values)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _operand_kind(a.values, b.values)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.values - b.values, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _operand_kind(a.values, b.values)
    av, bv = a.values, b.values

    def backward(g):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return _make(av * bv, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _operand_kind(a.values, b.values)
    av, bv = a.values, b.values
    if np.any(bv == 0):
        raise DomainError("division by zero")

    def backward(g):
        return _reduce_to(g / bv, av.shape), _reduce_to(-g * av / (bv * bv), bv.shape)

    return _make(av / bv, (a, b), backward, "div")


# -- elementwise unary -----------------------------------------------------


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av <= 0):
        raise DomainError("log of a nonpositive value")
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a: Tensor) -> Tensor:
    av = a.values
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


# -- reductions ------------------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.values.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with max subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks visible entries; hidden
    entries get probability exactly zero. Every slice must keep at least one
    visible entry.
    """
    xv = x.values
    if xv.ndim == 0 or xv.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    if mask is not None:
        mask = np.broadcast_to(mask, xv.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax slice with every entry masked")
        shifted = np.where(mask, xv, -np.inf)
    else:
        shifted = xv
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def logsumexp_lastdim(x: Tensor) -> Tensor:
    xv = x.values
    if xv.ndim == 0 or xv.shape[-1] == 0:
        raise ShapeError("logsumexp over an empty last dimension")
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s

    def backward(g):
        return (p * g[..., None],)

    return _make(out, (x,), backward, "logsumexp")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xv = x.values
    m = xv.max(axis=-1, keepdims=True)
    z = xv - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# -- linear algebra and shape ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    if bv.ndim == 2:
        out = av @ bv

        def backward(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:
        if av.shape[:-2] != bv.shape[:-2]:
            raise ShapeError(f"matmul batch dimensions differ: {av.shape} @ {bv.shape}")
        out = av @ bv

        def backward(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _make(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.values.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.values.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = np.array(a.values[index], dtype=DTYPE)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward, "getitem")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Rows of a 2-d tensor selected by integer index (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError("gather_rows index out of range")
    return getitem(a, idx)


def pick_lastdim(a: Tensor, idx) -> Tensor:
    """out[..., i] = a[..., i, idx[i]] for a 2-d ``a``: one entry per row."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, idx))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Iterable[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.values for t in tensors])

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


# -- model building blocks -------------------------------------------------


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight over the last axis; no bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    xv, wv = x.values, weight.values
    if wv.shape != (xv.shape[-1],):
        raise ShapeError(f"rmsnorm weight {wv.shape} does not match {xv.shape}")
    d = xv.shape[-1]
    r = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    n = xv * r
    out = n * wv

    def backward(g):
        gn = g * wv
        gx = r * (gn - n * (gn * n).sum(axis=-1, keepdims=True) / d)
        gw = (g * n).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _make(out, (x, weight), backward, "rmsnorm")


def rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding on the last axis (split-half convention).

    ``cos``/``sin`` have shape (T, d/2) and broadcast over leading axes.
    """
    xv = x.values
    half = xv.shape[-1] // 2
    x1, x2 = xv[..., :half], xv[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _make(out, (x,), backward, "rotate")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
