"""Differentiable primitives over :class:`Tensor`.

Images are NCHW. Ops that work per frame also accept a leading time axis
([T, N, C, H, W]); the leading two axes are merged for the computation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stsep.errors import ConfigError, UsageError
from stsep.tensorcore.tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, like: Tensor) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a, dtype=like.dtype)


# elementwise ----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), _coerce(b, as_tensor(a))
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), _coerce(b, as_tensor(a))
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), _coerce(b, as_tensor(a))
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return Tensor.from_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


# reductions and shape -------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return Tensor.from_op(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return Tensor.from_op(np.array(a.data[index]), (a,), bw, "getitem")


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = list(items)
    n = len(items)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor.from_op(np.stack([t.data for t in items], axis=axis), items, bw, "stack")


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = list(items)
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in items], axis=axis), items, bw, "concat")


def _merge(x: Tensor) -> tuple[Tensor, tuple[int, ...] | None]:
    if x.ndim == 5:
        t, n = x.shape[:2]
        return reshape(x, (t * n,) + x.shape[2:]), (t, n)
    if x.ndim != 4:
        raise UsageError(f"expected a 4-d or 5-d image tensor, got shape {x.shape}")
    return x, None


def _split(y: Tensor, lead: tuple[int, ...] | None) -> Tensor:
    return y if lead is None else reshape(y, lead + y.shape[1:])


# convolution ----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv2d_nchw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cin)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.reshape(cout, -1)
    out = cols @ wmat.T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip)."""
    xm, lead = _merge(x)
    n, cin, h, wd = xm.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d: kernel sizes must be odd")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: output would be empty for input {h}x{wd}")
    wdat = weight.data
    out, cols = _conv2d_nchw(xm.data, wdat, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(wdat.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if xm.requires_grad:
            dcols = gmat @ wdat.reshape(cout, -1)
            if kh == 1 and kw == 1 and padding == 0:
                dc = dcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
                if stride == 1:
                    gx = np.ascontiguousarray(dc)
                else:
                    gx = np.zeros((n, cin, h, wd), dtype=g.dtype)
                    gx[:, :, ::stride, ::stride][:, :, :ho, :wo] = dc
            else:
                dc = dcols.reshape(n, ho, wo, cin, kh, kw)
                gp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gp[:, :, padding:padding + h, padding:padding + wd] if padding else gp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (xm, weight, bias) if bias is not None else (xm, weight)
    return _split(Tensor.from_op(out, parents, bw, "conv2d"), lead)


# normalization --------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    A 5-d input [T, N, C, H, W] is normalized with separate statistics per
    time step, as if each step were a separate call; the running statistics
    then receive T sequential momentum updates. Running buffers are updated
    in place in training mode.
    """
    if eps <= 0:
        raise ConfigError("batch_norm: eps must be positive")
    xd = x.data
    five = xd.ndim == 5
    if xd.ndim not in (4, 5):
        raise UsageError(f"batch_norm expects 4-d or 5-d input, got {xd.shape}")
    c = xd.shape[-3]
    if gamma.shape != (c,):
        raise ConfigError(f"batch_norm: {c} channels but parameters for {gamma.shape[0]}")
    bshape = (1, 1, c, 1, 1) if five else (1, c, 1, 1)
    red = (1, 3, 4) if five else (0, 2, 3)
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)
    if training:
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
        xhat = xc * inv
        m = xd.size // (c * (xd.shape[0] if five else 1))
        unbias = m / max(m - 1, 1)
        mus = mu.reshape(-1, c) if five else mu.reshape(1, c)
        vars_ = var.reshape(-1, c) if five else var.reshape(1, c)
        for mu_t, var_t in zip(mus, vars_):
            running_mean *= 1 - momentum
            running_mean += momentum * mu_t
            running_var *= 1 - momentum
            running_var += momentum * unbias * var_t
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv
    out = xhat * gd + bd

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0,) + red if five else red) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0,) + red if five else red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                gm = gxhat.mean(axis=red, keepdims=True)
                gxm = (gxhat * xhat).mean(axis=red, keepdims=True)
                gx = inv * (gxhat - gm - xhat * gxm)
            else:
                gx = gxhat * inv
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), bw, "batch_norm")


# pooling and resampling -----------------------------------------------------

def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    xm, lead = _merge(x)
    xd = xm.data
    n, c, h, w = xd.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else xd
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == k, g, 0)
        return (gp[:, :, padding:padding + h, padding:padding + w] if padding else gp,)

    return _split(Tensor.from_op(np.ascontiguousarray(out), (xm,), bw, "max_pool2d"), lead)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping average pooling with kernel = stride = ``factor``."""
    if factor == 1:
        return x
    xm, lead = _merge(x)
    n, c, h, w = xm.shape
    if h % factor or w % factor:
        raise ConfigError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    out = xm.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def bw(g):
        gg = np.broadcast_to((g * g.dtype.type(inv))[:, :, :, None, :, None], (n, c, h // factor, factor, w // factor, factor))
        return (gg.reshape(n, c, h, w),)

    return _split(Tensor.from_op(out, (xm,), bw, "avg_pool2d"), lead)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    xm, lead = _merge(x)
    n, c, h, w = xm.shape
    out = np.broadcast_to(xm.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)).reshape(n, c, h * factor, w * factor)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _split(Tensor.from_op(out, (xm,), bw, "upsample_nearest"), lead)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [..., C, H, W] -> [..., C]."""
    shape = x.shape
    hw = shape[-1] * shape[-2]
    out = x.data.mean(axis=(-2, -1))

    def bw(g):
        return (np.broadcast_to((g * g.dtype.type(1.0 / hw))[..., None, None], shape).copy(),)

    return Tensor.from_op(out, (x,), bw, "global_avg_pool")


def channel_mean(x: Tensor, group: int) -> Tensor:
    """Average consecutive groups of ``group`` channels (parameter-free C -> C/group)."""
    if group == 1:
        return x
    xm, lead = _merge(x)
    n, c, h, w = xm.shape
    if c % group:
        raise ConfigError(f"channel_mean: {c} channels not divisible by {group}")
    out = xm.data.reshape(n, c // group, group, h, w).mean(axis=2)
    inv = 1.0 / group

    def bw(g):
        gg = np.broadcast_to((g * g.dtype.type(inv))[:, :, None], (n, c // group, group, h, w))
        return (gg.reshape(n, c, h, w),)

    return _split(Tensor.from_op(out, (xm,), bw, "channel_mean"), lead)


def channel_repeat(x: Tensor, times: int) -> Tensor:
    """Repeat each channel ``times`` times in place (parameter-free C -> C*times)."""
    if times == 1:
        return x
    xm, lead = _merge(x)
    n, c, h, w = xm.shape
    out = np.broadcast_to(xm.data[:, :, None], (n, c, times, h, w)).reshape(n, c * times, h, w)

    def bw(g):
        return (g.reshape(n, c, times, h, w).sum(axis=2),)

    return _split(Tensor.from_op(out, (xm,), bw, "channel_repeat"), lead)


# dense layers and losses ----------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis; weight is [out, in]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ConfigError(f"linear: input features {xd.shape[-1]} != {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, bw, "linear")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    n = z.shape[0]
    logp = log_softmax_np(z)
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return Tensor.from_op(loss, (logits,), bw, "cross_entropy")


# operator sugar -------------------------------------------------------------

def _rsub(a, b):
    return sub(_coerce(b, a), a)


Tensor.__add__ = lambda a, b: add_scalar(a, b) if np.isscalar(b) else add(a, b)
Tensor.__radd__ = lambda a, b: add_scalar(a, b) if np.isscalar(b) else add(b, a)
Tensor.__sub__ = lambda a, b: add_scalar(a, -b) if np.isscalar(b) else sub(a, b)
Tensor.__rsub__ = lambda a, b: add_scalar(neg(a), b) if np.isscalar(b) else _rsub(a, b)
Tensor.__mul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(a, b)
Tensor.__rmul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(b, a)
Tensor.__truediv__ = lambda a, b: scale(a, 1.0 / b)
Tensor.__neg__ = neg
Tensor.__getitem__ = getitem
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
