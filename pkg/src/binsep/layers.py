"""Neural network layers built on the autograd engine.

Layers are small classes holding DiffTensor parameters; the functional
conv ops are exposed separately so tests can drive them directly against
brute-force oracles.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import autograd as ag
from .autograd import DiffTensor


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return DiffTensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return DiffTensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return DiffTensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Parameter container with recursive discovery over attributes."""

    def named_params(self, prefix=""):
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, DiffTensor) and attr.requires_grad:
                yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_params(f"{full}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, np.ndarray):
                yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_buffers(f"{full}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def state_dict(self):
        state = {name: p.values.copy() for name, p in self.named_params()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_params())
        buffers = dict(self.named_buffers())
        missing = []
        for name, p in params.items():
            if name not in state:
                missing.append(name)
                continue
            if state[name].shape != p.values.shape:
                raise ValueError(
                    f"shape mismatch for {name}: "
                    f"checkpoint {state[name].shape} vs model {p.values.shape}"
                )
            p.values[...] = state[name]
        for name, b in buffers.items():
            if name not in state:
                missing.append(name)
                continue
            b[...] = state[name]
        if strict and missing:
            raise ValueError(f"missing parameters in state: {missing}")


# -- convolution --------------------------------------------------------------


def _conv_windows(xp, kh, kw, stride):
    """Strided view of padded input: (N, C, Ho, Wo, kh, kw)."""
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2D cross-correlation. x: (N,C,H,W), weight: (O,C,kh,kw)."""
    x = ag._wrap(x)
    weight = ag._wrap(weight)
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if stride < 1:
        raise ValueError("stride must be positive")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    xp = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = _conv_windows(xp, kh, kw, stride)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.values.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = ag._wrap(bias)
        out = out + bias.values.reshape(1, o, 1, 1)
        parents.append(bias)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight._accumulate((gflat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if ph:
                gxp = gxp[:, :, ph:-ph, :]
            if pw:
                gxp = gxp[:, :, :, pw:-pw]
            x._accumulate(gxp)

    return ag.custom_op(out.astype(x.dtype, copy=False), parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed 2D convolution. x: (N,C,H,W), weight: (C,O,kh,kw)."""
    x = ag._wrap(x)
    weight = ag._wrap(weight)
    n, c, h, w = x.shape
    cw, o, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c}, weight {cw}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    xmat = x.values.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    y = (xmat @ weight.values.reshape(c, o * kh * kw)).reshape(n, h, w, o, kh, kw)
    full = np.zeros((n, o, ho + 2 * padding, wo + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + h * stride : stride, j : j + w * stride : stride] += y[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    parents = [x, weight]
    if bias is not None:
        bias = ag._wrap(bias)
        out = out + bias.values.reshape(1, o, 1, 1)
        parents.append(bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = _conv_windows(gp, kh, kw, stride)  # (N, O, H, W, kh, kw)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, o * kh * kw)
        wmat = weight.values.reshape(c, o * kh * kw)
        if x.requires_grad:
            gx = (cols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            x._accumulate(gx)
        if weight.requires_grad:
            weight._accumulate((xmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return ag.custom_op(out, parents, backward)


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, bias=True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = in_ch * kh * kw
        self.weight = kaiming_uniform(rng, (out_ch, in_ch, kh, kw), fan_in)
        self.bias = zeros_param((out_ch,)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, bias=True):
        fan_in = in_ch * kernel * kernel
        self.weight = kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in)
        self.bias = zeros_param((out_ch,)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, bias=True):
        self.weight = kaiming_uniform(rng, (in_dim, out_dim), in_dim)
        self.bias = zeros_param((out_dim,)) if bias else None

    def __call__(self, x):
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training=False):
        x = ag._wrap(x)
        c = x.shape[1]
        if training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm2d training mode requires batch size >= 2")
            mu = ag.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = ag.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu.values.reshape(c)).astype(
                np.float32
            )
            self.running_var = ((1 - m) * self.running_var + m * var.values.reshape(c)).astype(
                np.float32
            )
            xhat = centered * ag.power(var + self.eps, -0.5)
        else:
            mu = self.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
            sd = np.sqrt(self.running_var + self.eps).reshape(1, c, 1, 1).astype(x.dtype)
            xhat = (x - DiffTensor(mu)) * DiffTensor(1.0 / sd)
        g = ag.reshape(self.gamma, (1, c, 1, 1))
        b = ag.reshape(self.beta, (1, c, 1, 1))
        return xhat * g + b


class MultiHeadAttention(Module):
    """Scaled dot-product attention with `heads` heads over (B, L, d) inputs."""

    def __init__(self, rng, dim, heads=8):
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, query, key, value):
        squeeze = query.ndim == 2
        if squeeze:
            query = ag.reshape(query, (1,) + query.shape)
            key = ag.reshape(key, (1,) + key.shape)
            value = ag.reshape(value, (1,) + value.shape)
        b, lq, d = query.shape
        lk = key.shape[1]
        h = self.heads
        dh = d // h
        q = ag.transpose(ag.reshape(self.wq(query), (b, lq, h, dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(self.wk(key), (b, lk, h, dh)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(self.wv(value), (b, lk, h, dh)), (0, 2, 1, 3))
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.matmul(attn, v)  # (b, h, lq, dh)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
        out = self.wo(ctx)
        if squeeze:
            out = ag.reshape(out, (lq, d))
        return out


def adaptive_max_pool2d(x, target_hw):
    """Adaptive max pooling over the trailing two axes of an ndarray.

    Pure numpy (used on network inputs, not inside the autograd graph).
    Window edges follow floor/ceil partitioning of the input extent.
    """
    x = np.asarray(x)
    th, tw = target_hw
    h, w = x.shape[-2], x.shape[-1]
    if th > h or tw > w:
        raise ValueError(f"pool target {target_hw} larger than input {(h, w)}")
    out = np.empty(x.shape[:-2] + (th, tw), dtype=x.dtype)
    for i in range(th):
        h0, h1 = (i * h) // th, -(-((i + 1) * h) // th)
        for j in range(tw):
            w0, w1 = (j * w) // tw, -(-((j + 1) * w) // tw)
            out[..., i, j] = x[..., h0:h1, w0:w1].max(axis=(-2, -1))
    return out
