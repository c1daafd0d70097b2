"""Reverse-mode autodiff over dense float64 numpy arrays.

A Tensor wraps an ndarray together with the closure that routes gradients
back to its parents. Calling ``backward()`` on a scalar loss linearizes the
recorded graph once (iterative topological order, no recursion) and replays
it in reverse, accumulating gradients into every tensor that needs one.

All values are float64 and must be finite; any operation that produces a
NaN or infinity raises NonFiniteError at the point of creation rather than
letting it propagate silently. Gradients of parameters that did not
participate in a loss read back as zeros.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "param",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "amax",
    "amin",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "conv1d_channel",
    "pool_reduce",
    "index_select",
    "concat",
    "expand",
    "group_norm",
    "layer_norm",
]

_grad_enabled = True

# tanh-form gelu constants
_GELU_K0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_K1 = 0.044715


@contextmanager
def no_grad():
    """Suspend graph recording inside the block. Purely a speed knob."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient; zeros for a parameter no loss touched."""
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values, detached from the graph."""
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient machinery ----------------------------------------------

    def zero_grad(self) -> None:
        self._grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _linearize(self)
        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is None or node._grad is None:
                continue
            for parent, g in node._bwd(node._grad):
                if parent.requires_grad or parent._bwd is not None:
                    if parent._grad is None:
                        parent._grad = np.zeros_like(parent.data)
                    parent._grad += g

    # -- operator sugar ----------------------------------------------------

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

    def __pow__(self, k):
        return _pow_scalar(self, k)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _linearize(root: Tensor) -> list[Tensor]:
    """Topological order with parents before consumers; visits each node once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    bwd: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]],
    what: str,
) -> Tensor:
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._grad = None
    if _grad_enabled and any(p.requires_grad or p._bwd is not None for p in parents):
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast up from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


# -- leaf constructors -----------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(out, (a, b), bwd, "add output")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _make(out, (a, b), bwd, "sub output")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return _make(out, (a, b), bwd, "mul output")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        return [
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ]

    return _make(out, (a, b), bwd, "div output")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return [(a, -g)]

    return _make(-a.data, (a,), bwd, "neg output")


def _pow_scalar(a: Tensor, k) -> Tensor:
    a = _as_tensor(a)
    k = float(k)
    out = a.data**k

    def bwd(g):
        return [(a, g * k * a.data ** (k - 1.0))]

    return _make(out, (a,), bwd, "pow output")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 on both sides, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _make(out, (a, b), bwd, "matmul output")


# -- shape movement ----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return [(a, g.reshape(a.shape))]

    return _make(out, (a,), bwd, "reshape output")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return [(a, g.transpose(inv))]

    return _make(out, (a,), bwd, "transpose output")


def expand(a, shape) -> Tensor:
    """Broadcast to `shape`; the backward pass sums the expansion back."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape))]

    return _make(out, (a,), bwd, "expand output")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        grads = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            grads.append((p, g[tuple(sl)]))
        return grads

    return _make(out, parts, bwd, "concat output")


def index_select(a, idx, axis: int = 0) -> Tensor:
    """Gather rows of `a` along axis 0; `idx` may have any shape.

    Output shape is idx.shape + a.shape[1:]. Repeated indices are fine:
    their gradients accumulate.
    """
    a = _as_tensor(a)
    if axis != 0:
        raise ShapeError("index_select only gathers along axis 0")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("index_select needs integer indices")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"index out of range for axis of length {n}")
    out = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return [(a, buf)]

    return _make(out, (a,), bwd, "index_select output")


# -- reductions --------------------------------------------------------------


def _restore_axes(g: np.ndarray, axis, keepdims: bool, src_shape: tuple[int, ...]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(src_shape)), src_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(src_shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, src_shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        return [(a, _restore_axes(g, axis, keepdims, a.shape).copy())]

    return _make(np.asarray(out), (a,), bwd, "sum output")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(g):
        return [(a, _restore_axes(g, axis, keepdims, a.shape) / count)]

    return _make(np.asarray(out), (a,), bwd, "mean output")


def _extreme(a, axis: int, keepdims: bool, biggest: bool) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(axis, int):
        raise ShapeError("max/min reduction needs a single integer axis")
    pick = np.argmax(a.data, axis=axis) if biggest else np.argmin(a.data, axis=axis)
    picked = np.take_along_axis(a.data, np.expand_dims(pick, axis), axis)
    out = picked if keepdims else np.squeeze(picked, axis=axis)

    def bwd(g):
        # gradient lands only on the first extremal entry along the axis
        buf = np.zeros_like(a.data)
        ge = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(buf, np.expand_dims(pick, axis), ge, axis)
        return [(a, buf)]

    return _make(out, (a,), bwd, "max output" if biggest else "min output")


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, biggest=True)


def amin(a, axis: int, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, biggest=False)


def pool_reduce(a, axis: int, mode: str) -> Tensor:
    if mode == "max":
        return amax(a, axis=axis)
    if mode == "avg":
        return tmean(a, axis=axis)
    raise ShapeError(f"unknown pool mode {mode!r}")


# -- pointwise ---------------------------------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return [(a, g * out)]

    return _make(out, (a,), bwd, "exp output")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        return [(a, g / a.data)]

    return _make(out, (a,), bwd, "log output")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return [(a, g * 0.5 / out)]

    return _make(out, (a,), bwd, "sqrt output")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return [(a, g * (1.0 - out * out))]

    return _make(out, (a,), bwd, "tanh output")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return [(a, g * out * (1.0 - out))]

    return _make(out, (a,), bwd, "sigmoid output")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return [(a, g * (a.data > 0.0))]

    return _make(out, (a,), bwd, "relu output")


def gelu(a) -> Tensor:
    """tanh-form gelu: 0.5*x*(1 + tanh(k0*(x + k1*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_K0 * (x + _GELU_K1 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * x * x)
        return [(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))]

    return _make(out, (a,), bwd, "gelu output")


# -- normalizing maps --------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return [(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))]

    return _make(out, (a,), bwd, "softmax output")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return [(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))]

    return _make(out, (a,), bwd, "log_softmax output")


def conv1d_channel(x, kernel, bias) -> Tensor:
    """Slide a 1-d kernel across the channel axis (axis -2) of `x`.

    `x` has shape (..., C, L); the kernel has odd length and the output is
    zero-padded back to C channels, so shape is preserved. E.g. the window-3
    output at channel c is k0*x[c-1] + k1*x[c] + k2*x[c+1] + bias.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim < 2:
        raise ShapeError(f"conv1d_channel needs (..., C, L) input, got {x.shape}")
    if kernel.ndim != 1 or kernel.shape[0] % 2 != 1:
        raise ShapeError(f"kernel must be 1-d with odd length, got {kernel.shape}")
    if bias.size != 1:
        raise ShapeError(f"bias must be a single scalar, got {bias.shape}")
    lam = kernel.shape[0]
    half = (lam - 1) // 2
    c = x.shape[-2]
    pad_spec = [(0, 0)] * x.ndim
    pad_spec[-2] = (half, half)
    xp = np.pad(x.data, pad_spec)
    out = np.zeros_like(x.data)
    for d in range(lam):
        out += kernel.data[d] * xp[..., d : d + c, :]
    out += bias.data.reshape(())

    def bwd(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros(lam)
        for d in range(lam):
            dxp[..., d : d + c, :] += kernel.data[d] * g
            dk[d] = (g * xp[..., d : d + c, :]).sum()
        dx = dxp[..., half : half + c, :]
        return [
            (x, np.ascontiguousarray(dx)),
            (kernel, dk),
            (bias, np.full_like(bias.data, g.sum())),
        ]

    return _make(out, (x, kernel, bias), bwd, "conv1d_channel output")


def group_norm(x, groups: int, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize (..., C, L) over channel groups, then apply per-channel affine.

    Statistics are taken jointly over each group's channels and all L
    positions, so a group with constant values normalizes to zeros.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"group_norm needs (..., C, L) input, got {x.shape}")
    c = x.shape[-2]
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"{groups} groups do not divide {c} channels")
    scale, shift = _as_tensor(scale), _as_tensor(shift)
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    lead = x.shape[:-2]
    grouped = reshape(x, lead + (groups, (c // groups) * x.shape[-1]))
    mu = tmean(grouped, axis=-1, keepdims=True)
    centered = sub(grouped, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    normed = reshape(normed, x.shape)
    return add(mul(normed, reshape(scale, (c, 1))), reshape(shift, (c, 1)))


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with per-feature affine parameters."""
    x = _as_tensor(x)
    c = x.shape[-1]
    scale, shift = _as_tensor(scale), _as_tensor(shift)
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, scale), shift)
