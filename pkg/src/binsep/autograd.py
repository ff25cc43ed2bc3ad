"""Reverse-mode automatic differentiation on numpy arrays.

A DiffTensor wraps an ndarray and records the operation that produced it.
Calling backward() on a scalar output walks the graph in reverse
topological order and accumulates gradients into every tensor that has
requires_grad set. Storage dtype follows the inputs (float32 for training,
float64 for gradient checking).
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class DiffTensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, parents=(), backward=None):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents if _grad_enabled else ()
        self._backward = backward if _grad_enabled else None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"DiffTensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.values)

    def detach(self):
        return DiffTensor(self.values, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g):
        g = _unbroadcast(np.asarray(g), self.values.shape)
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.values)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add(-self, other)
        return add(_wrap(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # method aliases used all over the model code
    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return power(self, 0.5)

    def exp(self):
        return exp(self)


def _wrap(x):
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64 if not hasattr(x, "dtype") else None))


def _node(values, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not _grad_enabled or not req:
        return DiffTensor(values)
    out = DiffTensor(values, requires_grad=True, parents=tuple(parents), backward=backward)
    return out


# -- elementwise / structural primitives -------------------------------------


def add(a, b):
    # scalar fast path keeps the tensor dtype (avoids float64 promotion)
    if isinstance(b, (int, float)) and isinstance(a, DiffTensor):
        out_vals = a.values + b

        def backward_s(g):
            if a.requires_grad:
                a._accumulate(g)

        return _node(out_vals, (a,), backward_s)
    a, b = _wrap(a), _wrap(b)
    out_vals = a.values + b.values

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(out_vals, (a, b), backward)


def mul(a, b):
    if isinstance(b, (int, float)) and isinstance(a, DiffTensor):
        out_vals = a.values * b

        def backward_s(g):
            if a.requires_grad:
                a._accumulate(g * b)

        return _node(out_vals, (a,), backward_s)
    a, b = _wrap(a), _wrap(b)
    out_vals = a.values * b.values

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.values)
        if b.requires_grad:
            b._accumulate(g * a.values)

    return _node(out_vals, (a, b), backward)


def power(a, exponent):
    a = _wrap(a)
    out_vals = a.values ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.values ** (exponent - 1))

    return _node(out_vals, (a,), backward)


def exp(a):
    a = _wrap(a)
    out_vals = np.exp(a.values)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_vals)

    return _node(out_vals, (a,), backward)


def log(a):
    a = _wrap(a)
    out_vals = np.log(a.values)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.values)

    return _node(out_vals, (a,), backward)


def abs_(a):
    a = _wrap(a)
    out_vals = np.abs(a.values)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.values))

    return _node(out_vals, (a,), backward)


def sigmoid(a):
    a = _wrap(a)
    out_vals = 1.0 / (1.0 + np.exp(-a.values))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_vals * (1.0 - out_vals))

    return _node(out_vals, (a,), backward)


def relu(a):
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope=0.2):
    a = _wrap(a)
    mask = a.values > 0
    out_vals = np.where(mask, a.values, slope * a.values)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(mask, 1.0, slope))

    return _node(out_vals, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.values.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.values.shape))

    return _node(out_vals, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.values.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_vals = a.values @ b.values

    def backward(g):
        if a.requires_grad:
            if b.values.ndim == 1:
                ga = np.multiply.outer(g, b.values) if g.ndim else g * b.values
            else:
                ga = g @ np.swapaxes(b.values, -1, -2)
            a._accumulate(_unbroadcast(np.asarray(ga), a.values.shape))
        if b.requires_grad:
            if a.values.ndim == 1:
                gb = np.multiply.outer(a.values, g)
            else:
                gb = np.swapaxes(a.values, -1, -2) @ g
            b._accumulate(_unbroadcast(np.asarray(gb), b.values.shape))

    return _node(out_vals, (a, b), backward)


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_vals = a.values.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.values.shape))

    return _node(out_vals, (a,), backward)


def transpose(a, axes=None):
    a = _wrap(a)
    out_vals = a.values.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _node(out_vals, (a,), backward)


def take(a, idx):
    a = _wrap(a)
    out_vals = a.values[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _node(out_vals, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(out_vals, tuple(tensors), backward)


def pad2d(a, pad):
    """Zero-pad the last two axes by `pad` on each side."""
    a = _wrap(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.values.ndim - 2) + [(pad, pad), (pad, pad)]
    out_vals = np.pad(a.values, width)

    def backward(g):
        if a.requires_grad:
            sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
            a._accumulate(g[sl])

    return _node(out_vals, (a,), backward)


def custom_op(values, parents, backward):
    """Build a graph node from an externally computed forward pass.

    `backward(g)` receives the output gradient and must call
    parent._accumulate itself for every parent that requires grad.
    """
    return _node(values, tuple(parents), backward)


# -- composites ---------------------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    shifted = add(a, DiffTensor(-a.values.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return e / sum_(e, axis=axis, keepdims=True)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a = _wrap(a)
    mu = mean(a, axis=-1, keepdims=True)
    centered = a - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    normed = centered * power(var + eps, -0.5)
    return normed * gamma + beta


def finite_diff_check(f, x, h=1e-3):
    """Max relative error between backward-pass and central-difference grads.

    `f` maps a DiffTensor to a scalar DiffTensor; `x` is a float64 ndarray.
    """
    x = np.asarray(x, dtype=np.float64)
    t = DiffTensor(x.copy(), requires_grad=True)
    out = f(t)
    out.backward()
    g_bp = t.grad.copy()

    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            hi = f(DiffTensor(x)).item()
        flat[i] = orig - h
        with no_grad():
            lo = f(DiffTensor(x)).item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(g_bp), np.abs(g_fd)), 1e-6)
    return float(np.max(np.abs(g_bp - g_fd) / denom))
