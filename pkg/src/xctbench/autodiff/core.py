"""Reverse-mode differentiation over dense float64 arrays."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .. import kernels


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class DiffArray:
    """A float64 array that records how it was computed.

    Leaves created with ``requires_grad=True`` own a ``grad`` accumulator of the
    same shape; every other array has ``grad = None``.
    """

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise NumericError(f"non-finite value in {name or 'array'}")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return self._backward is None

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)


def as_array(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(value, parents, backward_fn, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced a non-finite value")
    out = DiffArray.__new__(DiffArray)
    out.value = value
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.name = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Nodes reachable from ``root`` in topological order (inputs before outputs)."""

    def __init__(self, root):
        self.nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "sub")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def neg(a):
    a = as_array(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "mul")
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b):
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)), "div")


def matmul(a, b):
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.value, b.value), (a, b), back, "matmul")


def relu(x):
    x = as_array(x)
    pos = x.value > 0
    return _make(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x):
    x = as_array(x)
    y = expit(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    x = as_array(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_array(x)
    if np.any(x.value <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def clip(x, lo, hi):
    x = as_array(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _make(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x, axis=-1):
    x = as_array(x)
    e = np.exp(x.value - x.value.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def reduce_sum(x, axis=None, keepdims=False):
    x = as_array(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), back, "reduce_sum")


def reduce_mean(x, axis=None, keepdims=False):
    x = as_array(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_array(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(arrays, axis=0):
    arrays = [as_array(a) for a in arrays]
    ref = list(arrays[0].shape)
    for a in arrays[1:]:
        other = list(a.shape)
        if len(other) != len(ref) or any(p != q for i, (p, q) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {arrays[0].shape} and {a.shape}")
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _make(np.concatenate([a.value for a in arrays], axis=axis), tuple(arrays),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation. x: (N, C, H, W); w: (O, C/groups, k, k); b: (O,)."""
    x, w = as_array(x), as_array(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd-sized, got {w.shape}")
    if c != cg * groups or o % groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} (groups={groups})")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    hp, wp = xp.shape[2:]
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = kernels.im2col(xp, k, stride).reshape(n, groups, cg * k * k, ho * wo)
    wm = w.value.reshape(groups, o // groups, cg * k * k)
    out = np.matmul(wm, cols).reshape(n, o, ho, wo)
    parents = (x, w)
    if b is not None:
        b = as_array(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = out + b.value[None, :, None, None]
        parents = (x, w, b)

    def back(g):
        gm = g.reshape(n, groups, o // groups, ho * wo)
        gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wm, -1, -2), gm).reshape(n, c * k * k, ho * wo)
            gxp = kernels.col2im(gcols, c, hp, wp, k, stride)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _make(out, parents, back, "conv2d")


def avg_pool2d(x, kernel=2, stride=None, padding=0):
    """Average pooling over k x k windows; zero padding counts toward the average."""
    x = as_array(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if padding == 0 and stride == kernel and h % kernel == 0 and w % kernel == 0:
        out = x.value.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

        def back(g):
            g = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
            return (g / (kernel * kernel),)

        return _make(out, (x,), back, "avg_pool2d")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    hp, wp = xp.shape[2:]
    ho, wo = (hp - kernel) // stride + 1, (wp - kernel) // stride + 1
    cols = kernels.im2col(xp.reshape(n * c, 1, hp, wp), kernel, stride)
    out = cols.mean(axis=1).reshape(n, c, ho, wo)

    def back(g):
        gcols = np.repeat(g.reshape(n * c, 1, ho * wo) / (kernel * kernel), kernel * kernel, axis=1)
        gxp = kernels.col2im(gcols, 1, hp, wp, kernel, stride).reshape(n, c, hp, wp)
        return (gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp,)

    return _make(out, (x,), back, "avg_pool2d")


def upsample_nearest(x, factor=2):
    x = as_array(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, factor, axis=2), factor, axis=3)
    return _make(out, (x,),
                 lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),), "upsample_nearest")
