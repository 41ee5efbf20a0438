"""Differentiable volumetric and normalization operators.

Volumes are channel-major ``(C, D, H, W)``; a leading batch axis is never used.
Every op validates shapes before allocating its output.
"""
import math

import numpy as np
from scipy.special import erf

from .. import kernels
from .runtime import memory
from .tensor import DimensionError, Tensor, as_tensor, concat, matmul

__all__ = [
    "matmul", "concat", "conv3d", "pointwise_conv3d", "avg_pool3d", "trilinear_upsample3d",
    "softmax_over_axes", "gelu", "leaky_relu", "activation", "sigmoid", "instance_norm",
    "layer_norm", "attention_pool", "attention_unpool", "bce_with_logits",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_volume(x, name="x"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be (C, D, H, W), got shape {x.shape}")
    if min(x.shape[1:]) < 1:
        raise DimensionError(f"{name} has a zero spatial extent: {x.shape}")


def conv3d(x, w, bias=None, stride=1):
    """3x3x3 cross-correlation with zero padding 1 and stride 1 or 2."""
    _check_volume(x)
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise DimensionError(f"conv3d weight must be (C_out, C_in, 3, 3, 3), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv3d stride must be 1 or 2, got {stride}")
    c_out, c_in = w.shape[:2]
    spatial = tuple(kernels.out_extent(n, stride) for n in x.shape[1:])
    p = int(np.prod(spatial))

    cols = kernels.im2col3d(x.data, stride)
    memory.track(cols, cols.nbytes)
    w2 = w.data.reshape(c_out, c_in * 27)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    x_shape = x.shape

    def backward(g):
        g2 = g.reshape(c_out, p)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = kernels.col2im3d(w2.T @ g2, x_shape, stride) if x.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    n = 2 * c_out * c_in * 27 * p + (c_out * p if bias is not None else 0)
    return Tensor._make(out.reshape((c_out,) + spatial), inputs, backward, n)


def pointwise_conv3d(x, w, bias=None):
    """Per-voxel linear map over channels; ``w`` is (C_out, C_in)."""
    _check_volume(x)
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"pointwise_conv3d channel mismatch: input {x.shape} vs weight {w.shape}")
    spatial = x.shape[1:]
    y = matmul(w, x.reshape(x.shape[0], -1))
    if bias is not None:
        y = y + bias.reshape(-1, 1)
    return y.reshape((w.shape[0],) + spatial)


def avg_pool3d(x, k=2):
    """Non-overlapping 2x2x2 mean pooling."""
    _check_volume(x)
    if k != 2:
        raise ValueError("only k=2 pooling is supported")
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise DimensionError(f"avg_pool3d needs even spatial extents, got {x.shape}")
    out = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(2, 4, 6))

    def backward(g):
        g = np.broadcast_to((g / 8.0)[:, :, None, :, None, :, None], (c, d // 2, 2, h // 2, 2, w // 2, 2))
        return (g.reshape(c, d, h, w).copy(),)

    return Tensor._make(out, (x,), backward, x.size)


def _up2(a, axis):
    # half-pixel linear upsampling by 2 along one axis, edge-clamped
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    out = np.stack([0.75 * a + 0.25 * prev, 0.75 * a + 0.25 * nxt], axis=1)
    out = out.reshape((2 * a.shape[0],) + a.shape[1:])
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def _up2_adjoint(g, axis):
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] // 2
    g = g.reshape((n, 2) + g.shape[1:])
    ge, go = g[:, 0], g[:, 1]
    out = 0.75 * (ge + go)
    out[:-1] += 0.25 * ge[1:]
    out[0] += 0.25 * ge[0]
    out[1:] += 0.25 * go[:-1]
    out[-1] += 0.25 * go[-1]
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def trilinear_upsample3d(x, factor=2):
    """Trilinear x2 upsampling, align-corners-false (half-pixel) sampling."""
    _check_volume(x)
    if factor != 2:
        raise ValueError("only factor=2 upsampling is supported")
    out = x.data
    for ax in (1, 2, 3):
        out = _up2(out, ax)

    def backward(g):
        for ax in (3, 2, 1):
            g = _up2_adjoint(g, ax)
        return (g,)

    return Tensor._make(out, (x,), backward, 3 * out.size)


def softmax_over_axes(x, axes):
    """Numerically stable softmax computed jointly over ``axes``."""
    axes = tuple(sorted({a % x.ndim for a in np.atleast_1d(axes)})) if np.size(axes) else ()
    if not axes:
        raise ValueError("softmax_over_axes needs at least one axis")
    e = np.exp(x.data - x.data.max(axis=axes, keepdims=True))
    s = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axes, keepdims=True)),)

    return Tensor._make(s, (x,), backward, 4 * x.size)


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(x.data * cdf, (x,), backward, 8 * x.size)


def leaky_relu(x, slope=0.01):
    pos = x.data > 0

    def backward(g):
        return (np.where(pos, g, slope * g),)

    return Tensor._make(np.where(pos, x.data, slope * x.data), (x,), backward, x.size)


def activation(x, kind="gelu"):
    if kind == "gelu":
        return gelu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.01)
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), 4 * x.size)


def _normalize(x, gamma, beta, axes, eps, param_shape):
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data.reshape(param_shape)
    out = xhat * gm + beta.data.reshape(param_shape)
    other = tuple(i for i in range(x.ndim) if param_shape[i] == 1)

    def backward(g):
        gxh = g * gm
        gx = inv * (gxh - gxh.mean(axis=axes, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=axes, keepdims=True))
        gg = (g * xhat).sum(axis=other).reshape(gamma.shape)
        gb = g.sum(axis=other).reshape(beta.shape)
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward, 8 * x.size)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-channel normalization over the spatial axes of a (C, D, H, W) volume."""
    _check_volume(x)
    if gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise DimensionError(f"instance_norm affine must be ({x.shape[0]},), got {gamma.shape}/{beta.shape}")
    return _normalize(x, gamma, beta, (1, 2, 3), eps, (x.shape[0], 1, 1, 1))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalization over the last (feature) axis."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine must be ({d},), got {gamma.shape}/{beta.shape}")
    return _normalize(x, gamma, beta, (x.ndim - 1,), eps, (1,) * (x.ndim - 1) + (d,))


def attention_pool(a, x):
    """Pool ``N`` tokens: t[n, f] = sum over voxels of a[n, v] * x[f, v]."""
    if a.shape[1:] != x.shape[1:]:
        raise DimensionError(f"attention_pool spatial mismatch: maps {a.shape} vs features {x.shape}")
    n, f = a.shape[0], x.shape[0]
    a2 = a.data.reshape(n, -1)
    x2 = x.data.reshape(f, -1)
    a_shape, x_shape = a.shape, x.shape

    def backward(g):
        ga = (g @ x2).reshape(a_shape) if a.requires_grad else None
        gx = (g.T @ a2).reshape(x_shape) if x.requires_grad else None
        return ga, gx

    return Tensor._make(a2 @ x2.T, (a, x), backward, 2 * n * f * a2.shape[1])


def attention_unpool(b, t):
    """Broadcast tokens back over space: y[f, v] = sum_n b[n, v] * t[n, f]."""
    if b.shape[0] != t.shape[0] or t.ndim != 2:
        raise DimensionError(f"attention_unpool token-count mismatch: maps {b.shape} vs tokens {t.shape}")
    n, f = t.shape
    spatial = b.shape[1:]
    b2 = b.data.reshape(n, -1)

    def backward(g):
        g2 = g.reshape(f, -1)
        gb = (t.data @ g2).reshape(b.shape) if b.requires_grad else None
        gt = b2 @ g2.T if t.requires_grad else None
        return gb, gt

    out = (t.data.T @ b2).reshape((f,) + spatial)
    return Tensor._make(out, (b, t), backward, 2 * n * f * b2.shape[1])


def bce_with_logits(z, target):
    """Mean binary cross-entropy from logits, log-sum-exp stable."""
    z = as_tensor(z)
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=z.dtype)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits shape mismatch: {z.shape} vs {y.shape}")
    zd = z.data
    loss = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size

    def backward(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * zd))
        return (g * (p - y) / n,)

    return Tensor._make(np.asarray(loss.mean(), dtype=zd.dtype), (z,), backward, 6 * n)
