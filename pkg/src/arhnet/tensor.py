#!/usr/bin/env python3
"""
🧮 Tensor - dense N x C x H x W x D arrays with reverse-mode autodiff.

Every op returns a new Tensor that remembers its parents and a closure
pushing the incoming gradient back to them. `backward(loss)` walks the
graph once in reverse topological order.

Conventions:
- conv3d is cross-correlation (no kernel flip), zero padding.
- Binary ops broadcast only over size-1 axes of equal-rank operands
  (per-channel (1, C, 1, 1, 1), per-instance (N, C, 1, 1, 1), masks
  (N, 1, H, W, D)) or against scalars.
- max routes its gradient to the first maximum in storage order.
- Values and gradients are float32 unless `precision(np.float64)` is active.
"""

from __future__ import annotations

import contextlib
import logging

import numpy as np
from scipy.special import expit

from .errors import ArhnetError, ShapeError

logger = logging.getLogger(__name__)

_state = {"dtype": np.float32}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily create tensors with `dtype` (np.float32 or np.float64)."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = previous


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.name = name
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or default_dtype()))


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


def _result(data, parents, backward_fn, op):
    """Wrap an op result; the graph is only kept when some parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _broadcast_shape(a, b, op):
    if a.ndim == 0:
        return b.shape
    if b.ndim == 0:
        return a.shape
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")
    return tuple(max(x, y) for x, y in zip(a.shape, b.shape))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum()
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# --- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward_fn, "div")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)

    def backward_fn(g):
        _accumulate(x, g * c)

    return _result(x.data * x.data.dtype.type(c), (x,), backward_fn, "scale")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    positive = x.data > 0
    factor = np.where(positive, 1.0, slope).astype(x.data.dtype)

    def backward_fn(g):
        _accumulate(x, g * factor)

    return _result(x.data * factor, (x,), backward_fn, "leaky_relu")


def relu(x):
    return leaky_relu(x, 0.0)


def sigmoid(x):
    x = as_tensor(x)
    out = expit(x.data).astype(x.data.dtype)

    def backward_fn(g):
        _accumulate(x, g * out * (1 - out))

    return _result(out, (x,), backward_fn, "sigmoid")


def absolute(x):
    x = as_tensor(x)

    def backward_fn(g):
        _accumulate(x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), backward_fn, "abs")


def sqrt(x):
    """Square root; the gradient at 0 is taken as 0 rather than infinity."""
    x = as_tensor(x)
    out = np.sqrt(np.maximum(x.data, 0))

    def backward_fn(g):
        safe = np.where(out > 0, out, 1)
        _accumulate(x, np.where(out > 0, g * 0.5 / safe, 0))

    return _result(out, (x,), backward_fn, "sqrt")


def clamp(x, lo=0.0, hi=1.0):
    """Clip to [lo, hi]; gradient passes wherever the input lies inside the closed range."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        _accumulate(x, g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), backward_fn, "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "abs": absolute,
    "sqrt": sqrt,
    "clamp": clamp,
}


def elementwise(op, *args, **params):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ArhnetError(f"unknown elementwise op '{op}' (known: {sorted(_ELEMENTWISE)})") from None
    return fn(*args, **params)


# --- reductions -------------------------------------------------------------

def _normalize_axes(x, axes):
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for axis in axes:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"invalid axis {axis} for shape {x.shape}")
        out.append(axis % x.ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(x, axes=None):
    x = as_tensor(x)
    axes = _normalize_axes(x, axes)

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axes, keepdims=True), (x,), backward_fn, "sum")


def reduce_mean(x, axes=None):
    x = as_tensor(x)
    axes = _normalize_axes(x, axes)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g / count, x.shape))

    return _result(x.data.mean(axis=axes, keepdims=True), (x,), backward_fn, "mean")


def reduce_max(x, axes=None):
    x = as_tensor(x)
    axes = _normalize_axes(x, axes)
    keep = [i for i in range(x.ndim) if i not in axes]
    perm = keep + list(axes)
    moved = x.data.transpose(perm)
    kept_shape = moved.shape[:len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    index = flat.argmax(axis=-1)[..., None]
    out_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    out = np.take_along_axis(flat, index, axis=-1).reshape(out_shape)

    def backward_fn(g):
        routed = np.zeros_like(flat)
        g_kept = g.transpose(perm).reshape(kept_shape + (1,))
        np.put_along_axis(routed, index, g_kept, axis=-1)
        _accumulate(x, routed.reshape(moved.shape).transpose(np.argsort(perm)))

    return _result(out, (x,), backward_fn, "max")


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op, x, axes=None):
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ArhnetError(f"unknown reduction '{op}' (known: {sorted(_REDUCE)})") from None
    return fn(x, axes)


# --- structural -------------------------------------------------------------

def concat(xs, axis=1):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    first = xs[0]
    axis = _normalize_axes(first, axis)[0]
    for x in xs[1:]:
        same_rank = x.ndim == first.ndim
        if not same_rank or any(a != b for i, (a, b) in enumerate(zip(x.shape, first.shape)) if i != axis):
            raise ShapeError(f"concat: {x.shape} does not match {first.shape} outside axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward_fn(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(x, g[tuple(index)])

    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward_fn, "concat")


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    f = int(factor)
    out = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    N, C, H, W, D = x.shape

    def backward_fn(g):
        _accumulate(x, g.reshape(N, C, H, f, W, f, D, f).sum(axis=(3, 5, 7)))

    return _result(out, (x,), backward_fn, "upsample")


def avg_pool(x, k=2, stride=2):
    x = as_tensor(x)
    if k != stride:
        raise ShapeError(f"avg_pool supports non-overlapping windows only (k={k}, stride={stride})")
    N, C, H, W, D = x.shape
    if H % k or W % k or D % k:
        raise ShapeError(f"avg_pool: spatial dims {x.shape[2:]} not divisible by {k}")
    out = x.data.reshape(N, C, H // k, k, W // k, k, D // k, k).mean(axis=(3, 5, 7))

    def backward_fn(g):
        spread = g.repeat(k, axis=2).repeat(k, axis=3).repeat(k, axis=4)
        _accumulate(x, spread / (k ** 3))

    return _result(out.astype(x.data.dtype), (x,), backward_fn, "avg_pool")


def forward_diff(x, axis):
    """out[i] = x[i + 1] - x[i] along `axis`; the last slice is 0."""
    x = as_tensor(x)
    axis = _normalize_axes(x, axis)[0]

    def along(lo, hi):
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, hi)
        return tuple(index)

    out = np.zeros_like(x.data)
    out[along(None, -1)] = x.data[along(1, None)] - x.data[along(None, -1)]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[along(1, None)] += g[along(None, -1)]
        gx[along(None, -1)] -= g[along(None, -1)]
        _accumulate(x, gx)

    return _result(out, (x,), backward_fn, "forward_diff")


# --- convolution and normalization ------------------------------------------

def _tap(offset, n, stride):
    return slice(offset, offset + stride * (n - 1) + 1, stride)


def conv3d(x, w, b=None, stride=1, padding=0):
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias {b.shape} does not match weight {w.shape}")
        parents = (x, w, b)

    N, C = x.shape[:2]
    O = w.shape[0]
    kernel = w.shape[2:]
    out_sp = tuple((s + 2 * padding - k) // stride + 1 for s, k in zip(x.shape[2:], kernel))
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: input {x.shape} too small for weight {w.shape} with padding {padding}")

    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(x.data, pad) if padding else x.data
    dtype = np.result_type(x.data, w.data)
    taps = list(np.ndindex(*kernel))

    def window(a, bb, c):
        return xp[:, :, _tap(a, out_sp[0], stride), _tap(bb, out_sp[1], stride), _tap(c, out_sp[2], stride)]

    acc = np.zeros((O, N) + out_sp, dtype=dtype)
    for a, bb, c in taps:
        acc += np.tensordot(w.data[:, :, a, bb, c], window(a, bb, c), axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    if b is not None:
        out += b.data.reshape(1, O, 1, 1, 1)

    def backward_fn(g):
        g_t = np.moveaxis(g, 1, 0)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for a, bb, c in taps:
                gw[:, :, a, bb, c] = np.tensordot(g_t, window(a, bb, c), axes=([1, 2, 3, 4], [0, 2, 3, 4]))
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=dtype)
            for a, bb, c in taps:
                contrib = np.tensordot(w.data[:, :, a, bb, c], g_t, axes=([0], [0]))
                gxp[:, :, _tap(a, out_sp[0], stride), _tap(bb, out_sp[1], stride),
                    _tap(c, out_sp[2], stride)] += np.moveaxis(contrib, 0, 1)
            if padding:
                p = padding
                gxp = gxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p, p:xp.shape[4] - p]
            _accumulate(x, gxp)

    return _result(out, parents, backward_fn, "conv3d")


def _standardize(x, axes, eps, op):
    x = as_tensor(x)
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=axes, keepdims=True) + eps)
    y = (centered * inv).astype(x.data.dtype)

    def backward_fn(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        gy_mean = (g * y).mean(axis=axes, keepdims=True)
        _accumulate(x, inv * (g - g_mean - y * gy_mean))

    return _result(y, (x,), backward_fn, op)


def instance_norm(x, eps=1e-5):
    """Per (n, c) standardization over the spatial voxels."""
    return _standardize(x, (2, 3, 4), eps, "instance_norm")


def batch_norm(x, eps=1e-5):
    """Per-channel standardization over batch and spatial voxels (batch statistics only)."""
    return _standardize(x, (0, 2, 3, 4), eps, "batch_norm")


# --- graph traversal --------------------------------------------------------

def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate dLoss/dt into `.grad` of every leaf reachable from `loss`.

    Returns those leaves. Leaf gradients add up across calls until zeroed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ArhnetError("loss is not connected to any tensor that requires gradients")
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        node._backward_fn(node.grad)
        # intermediate gradients are not needed once pushed to the parents
        node.grad = None
    return [node for node in order if node._backward_fn is None]


def as_batch(value):
    """Volume, mask or 3D/4D/5D array -> constant (N, C, H, W, D) tensor."""
    if isinstance(value, Tensor):
        return value
    array = value if isinstance(value, np.ndarray) else np.asarray(getattr(value, "data", value))
    if array.ndim == 3:
        array = array[None, None]
    elif array.ndim == 4:
        array = array[None]
    if array.ndim != 5:
        raise ShapeError(f"cannot read shape {array.shape} as an (N, C, H, W, D) batch")
    return Tensor(np.ascontiguousarray(array, dtype=default_dtype()))
