"""Small reverse-mode automatic differentiation over numpy arrays.

Every primitive records a closure that maps the upstream gradient to the
gradients of its inputs. ``backward`` walks the graph in reverse topological
order. Forward results and propagated gradients are checked for finiteness so a
blow-up is reported with the name of the primitive that produced it.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinity."""

    def __init__(self, primitive: str, where: str = "forward"):
        super().__init__(f"non-finite {where} value in primitive '{primitive}'")
        self.primitive = primitive
        self.where = where


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- gradient -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(node.op, "gradient")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


_kink_log: list[float] | None = None


@contextmanager
def watch_kinks():
    """Collect min |input| of every relu evaluated inside the block.

    Finite-difference checks use this to reject points sitting next to a kink.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def relu(a) -> Tensor:
    a = as_tensor(a)
    if _kink_log is not None and a.data.size:
        _kink_log.append(float(np.abs(a.data).min()))
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


# -- reductions and shape ------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.asarray(a.data[index]), "take", (a,), back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# -- composite-but-fused primitives ------------------------------------------

def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, "log_softmax", (a,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def masked_logsumexp(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(a) * mask)) along ``axis``; every row needs one unmasked entry."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=axis).all():
        raise NonFiniteError("masked_logsumexp")
    masked = np.where(mask, a.data, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    weights = e / s
    return _make(out, "masked_logsumexp", (a,),
                 lambda g: (np.expand_dims(g, axis) * weights,))


def conv2d(x, w, b=None, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation. x: (B, C, H, W), w: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols: (B, C, H', W', kh, kw)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True)
    if b is not None:
        out = out + parents[2].data[None, :, None, None]
    H, W = out.shape[2], out.shape[3]

    def back(g):
        gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, "conv2d", parents, back)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2; odd trailing rows/cols are dropped."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    core = x.data[:, :, : 2 * h2, : 2 * w2]
    out = core.reshape(B, C, h2, 2, w2, 2).mean(axis=(3, 5))

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        return (gx,)

    return _make(out, "avg_pool2", (x,), back)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def grad(fn: Callable[..., Tensor], params: dict[str, np.ndarray], *args, **kwargs):
    """Evaluate ``fn(leaves, *args)`` and return (value, {name: d value / d param})."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = fn(leaves, *args, **kwargs)
    if out.data.size != 1:
        raise ValueError("objective must be scalar")
    if out._backward is not None:
        out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(out.data), grads
