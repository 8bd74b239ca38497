"""Differentiable layer primitives with hand-written backward rules.

Layouts follow the (batch, channel, height, width) convention for images and
(batch, ..., features) for token sequences.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import LabelError, ShapeError
from .tensor import Tensor, as_tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=1):
    """Dense 2-D convolution; ``weight`` is (C_out, C_in, k, k)."""
    x = as_tensor(x)
    weight = as_tensor(weight, x.dtype)
    B, C, H, W = x.shape
    O, Ci, k, k2 = weight.shape
    if Ci != C or k != k2:
        raise ShapeError(f"conv2d weight {weight.shape} does not match input channels {C}")
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    xp = _pad_hw(x.data, padding)
    # columns: (B, C*k*k, Ho*Wo), ordered (c, i, j) to match weight.reshape(O, -1)
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(B, C * k * k, Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = out.reshape(B, O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(B, C, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return Tensor._make(out, tuple(parents), backward)


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=1):
    """Per-channel convolution; ``weight`` is (C, k, k)."""
    x = as_tensor(x)
    weight = as_tensor(weight, x.dtype)
    B, C, H, W = x.shape
    if weight.shape[0] != C:
        raise ShapeError(f"depthwise weight has {weight.shape[0]} channels, input has {C}")
    k = weight.shape[1]
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    xp = _pad_hw(x.data, padding)
    wd = weight.data
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += wd[None, :, i, j, None, None] * xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                if gxp is not None:
                    gxp[sl] += g * wd[None, :, i, j, None, None]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out, tuple(parents), backward)


def pointwise_conv2d(x, weight, bias=None):
    """1x1 convolution; ``weight`` is (C_out, C_in)."""
    B, C, H, W = x.shape
    if weight.shape[1] != C:
        raise ShapeError(f"pointwise weight expects {weight.shape[1]} channels, input has {C}")
    flat = x.reshape(B, C, H * W)
    out = weight @ flat
    if bias is not None:
        out = out + bias.reshape(1, -1, 1)
    return out.reshape(B, weight.shape[0], H, W)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    out = x @ transpose_last(weight)
    if bias is not None:
        out = out + bias
    return out


def transpose_last(w):
    axes = list(range(w.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return w.transpose(axes)


def layer_norm(x, gamma=None, beta=None, axis=-1, eps=1e-5):
    """Normalize along ``axis``; ``gamma``/``beta`` have length ``x.shape[axis]``."""
    x = as_tensor(x)
    xd = x.data
    axis = axis % xd.ndim
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * xd.ndim
    bshape[axis] = xd.shape[axis]
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma, x.dtype)
        beta = as_tensor(beta, x.dtype)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
        parents += [gamma, beta]
    reduce_axes = tuple(i for i in range(xd.ndim) if i != axis)

    def backward(g):
        if gamma is not None:
            gg = (g * xhat).sum(axis=reduce_axes)
            gb = g.sum(axis=reduce_axes)
            dxhat = g * gamma.data.reshape(bshape)
        else:
            dxhat = g
        gx = None
        if x.requires_grad:
            m1 = dxhat.mean(axis=axis, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gamma is not None:
            return gx, gg, gb
        return (gx,)

    return Tensor._make(out, tuple(parents), backward)


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), backward)


def softmax(x, axis=-1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), backward)


def avg_pool2d(x, size=2):
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"spatial size {(H, W)} not divisible by pool size {size}")
    xd = x.data
    out = xd.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def backward(g):
        gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) * scale
        return (gx.astype(xd.dtype, copy=False),)

    return Tensor._make(out, (x,), backward)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C)."""
    return x.mean(axis=(2, 3))


def gather_relative_bias(table, row_index, col_index):
    """Expand a (heads, R, R) offset table into (heads, L, L) pair biases."""
    td = table.data
    heads, R, R2 = td.shape
    flat = (row_index * R2 + col_index).ravel()
    L = row_index.shape[0]
    out = td.reshape(heads, R * R2)[:, flat].reshape(heads, L, L)

    def backward(g):
        gt = np.empty((heads, R * R2), dtype=td.dtype)
        gflat = g.reshape(heads, -1)
        for h in range(heads):
            gt[h] = np.bincount(flat, weights=gflat[h], minlength=R * R2)
        return (gt.reshape(td.shape),)

    return Tensor._make(out, (table,), backward)


def log_softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {ld.shape}")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    B, K = ld.shape
    if labels.shape[0] != B:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelError(f"labels must lie in [0, {K})")
    logp = log_softmax_np(ld)
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(B), labels] -= 1.0
        return ((grad * (g / B)).astype(ld.dtype, copy=False),)

    return Tensor._make(np.asarray(loss, dtype=ld.dtype), (logits,), backward)
