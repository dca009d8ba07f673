"""Reverse-mode automatic differentiation over numpy arrays.

Every op returns a new :class:`Tensor` holding a closure that maps the
output gradient to the input gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates ``.grad`` on
leaf tensors created with ``requires_grad=True``.

Tensors keep the dtype they were created with (float32 by default). Tests
run the same graph in float64 to compare against finite differences.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from .. import kernels

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        a = np.asarray(data)
        if dtype is not None:
            a = a.astype(dtype, copy=False)
        elif not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float32)
        self.data = a
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_ids)
        self._parents = ()
        self._backward = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def is_finite(self):
        ok = bool(np.all(np.isfinite(self.data)))
        if self.grad is not None:
            ok = ok and bool(np.all(np.isfinite(self.grad)))
        return ok

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- backward ----------------------------------------------------------

    def backward(self, grad=None):
        if self.data.size != 1 and grad is None:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached from every parameter")
        order = _topo_order(self)
        grads = {self.id: np.ones_like(self.data) if grad is None else np.asarray(grad, self.dtype)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if pg.shape != parent.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != {parent.shape} ({node.name})")
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # -- operators ---------------------------------------------------------

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward, name):
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None, name=name)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        gb = -g * out / b.data if b.requires_grad else None
        return unbroadcast(g / b.data, a.shape), None if gb is None else unbroadcast(gb, b.shape)
    return _make(out, (a, b), back, "div")


def power(a, p):
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(out, (a, b), back, "matmul")


# --------------------------------------------------------------- elementwise

def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x):
    # clip keeps finite inputs from overflowing to inf
    hi = np.log(np.finfo(x.dtype).max) - 1.0
    out = np.exp(np.minimum(x.data, hi))
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    safe = np.maximum(x.data, np.finfo(x.dtype).tiny)
    return _make(np.log(safe), (x,), lambda g: (g / safe,), "log")


def sqrt(x):
    out = np.sqrt(np.maximum(x.data, 0))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)
    return _make(out, (x,), back, "sqrt")


def abs_(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sin(x):
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x):
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def clip(x, lo=None, hi=None):
    out = np.clip(x.data, lo, hi)
    mask = out == x.data
    return _make(out, (x,), lambda g: (g * mask,), "clip")


# --------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))
    return _make(out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims),), "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims))
    return _make(out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims) / n,), "mean")


def sum_sq(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = np.asarray((x.data * x.data).sum(axis=axes, keepdims=keepdims))
    return _make(out, (x,), lambda g: (2.0 * x.data * _expand(g, x.shape, axes, keepdims),), "sum_sq")


def norm(x, axis=-1, keepdims=False):
    """L2 norm along ``axis``; the subgradient at 0 is taken as 0."""
    axes = _norm_axis(axis, x.ndim)
    n = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, x.data / n, 0.0)
        ge = g if keepdims else np.expand_dims(g, axes)
        return (unit * ge,)
    out = n if keepdims else np.squeeze(n, axis=axes)
    return _make(np.asarray(out), (x,), back, "norm")


# --------------------------------------------------------------- shape ops

def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx):
    if isinstance(idx, Tensor):
        raise TypeError("tensor indices are not supported")

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(np.asarray(x.data[idx]), (x,), back, "getitem")


slice_ = getitem


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def back(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)
    return _make(out, (x,), back, "upsample2x")


# --------------------------------------------------------------- convolution

def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv kernel {kh}x{kw} larger than input {h}x{wd} (+pad {padding})")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(wd, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(o, -1)
    out = (w2 @ cols).reshape(n, o, oh, ow)

    def back(g):
        g3 = g.reshape(n, o, oh * ow)
        gw = gx = None
        if w.requires_grad:
            gw = np.einsum("nol,nkl->ok", g3, cols).reshape(w.shape)
        if x.requires_grad:
            gx = kernels.col2im(w2.T @ g3, x.shape, kh, kw, stride, padding)
        return gx, gw
    return _make(out, (x, w), back, "conv2d")


# --------------------------------------------------- rotation helper scalars
#
# Smooth functions of s = theta^2 used by the axis-angle exp/log maps.
# Each switches to a Taylor series near 0 where the closed form cancels.

_SERIES_S = 1e-3


def _sinc_sqrt_parts(s):
    s = s.astype(np.float64)
    small = s < _SERIES_S
    t = np.sqrt(np.where(small, 1.0, s))
    val = np.where(small, 1 - s / 6 + s * s / 120 - s ** 3 / 5040, np.sin(t) / t)
    der = np.where(small, -1 / 6 + s / 60 - s * s / 1680 + s ** 3 / 90720,
                   (t * np.cos(t) - np.sin(t)) / (2 * t ** 3))
    return val, der


def _versine_parts(s):
    s = s.astype(np.float64)
    small = s < _SERIES_S
    t = np.sqrt(np.where(small, 1.0, s))
    ss = np.where(small, 1.0, s)
    val = np.where(small, 0.5 - s / 24 + s * s / 720 - s ** 3 / 40320, (1 - np.cos(t)) / ss)
    der = np.where(small, -1 / 24 + s / 360 - s * s / 13440 + s ** 3 / 907200,
                   (t * np.sin(t) / 2 - (1 - np.cos(t))) / (ss * ss))
    return val, der


def sinc_sqrt(s):
    """sin(sqrt(s)) / sqrt(s) for s >= 0."""
    val, der = _sinc_sqrt_parts(s.data)
    return _make(val.astype(s.dtype), (s,), lambda g: (g * der,), "sinc_sqrt")


def versine_sqrt(s):
    """(1 - cos(sqrt(s))) / s for s >= 0."""
    val, der = _versine_parts(s.data)
    return _make(val.astype(s.dtype), (s,), lambda g: (g * der,), "versine_sqrt")


def atan_ratio(s, c):
    """atan2(sqrt(s), c) / sqrt(s): angle over sine for the rotation log map."""
    s, c = _pair(s, c)
    sd = s.data.astype(np.float64)
    cd = c.data.astype(np.float64)
    small = (sd < _SERIES_S * cd * cd) & (cd > 0)
    q = np.sqrt(np.where(small, 1.0, sd))
    cs = np.where(small, cd, 1.0)
    ang = np.arctan2(q, cd)
    val = np.where(small, 1 / cs - sd / (3 * cs ** 3) + sd ** 2 / (5 * cs ** 5) - sd ** 3 / (7 * cs ** 7),
                   ang / q)
    ds = np.where(small, -1 / (3 * cs ** 3) + 2 * sd / (5 * cs ** 5) - 3 * sd ** 2 / (7 * cs ** 7),
                  (cd * q / (sd + cd * cd) - ang) / (2 * q ** 3))
    dc = -1.0 / (sd + cd * cd)

    def back(g):
        return unbroadcast(g * ds, s.shape), unbroadcast(g * dc, c.shape)
    return _make(val.astype(s.dtype), (s, c), back, "atan_ratio")
