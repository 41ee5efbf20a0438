"""Pure-numpy reference kernels for 3x3x3, pad-1 volumetric convolution.

These are the fallback used when the compiled ``_ckernels`` extension is not
built. Both implementations share the exact same gather layout, so
``im2col3d`` results are bit-identical between them.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_extent(n, stride):
    return (n + 2 - 3) // stride + 1


def im2col3d(x, stride):
    """Gather 3x3x3 neighbourhoods of ``x`` (C, D, H, W) into a (C*27, P) matrix."""
    c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3))
    return cols.reshape(c * 27, od * oh * ow)


def col2im3d(cols, shape, stride):
    """Scatter-add the adjoint of :func:`im2col3d` back to a (C, D, H, W) volume."""
    c, d, h, w = shape
    od, oh, ow = out_extent(d, stride), out_extent(h, stride), out_extent(w, stride)
    cols = cols.reshape(c, 3, 3, 3, od, oh, ow)
    xp = np.zeros((c, d + 2, h + 2, w + 2), dtype=cols.dtype)
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                xp[:,
                   kd:kd + stride * (od - 1) + 1:stride,
                   kh:kh + stride * (oh - 1) + 1:stride,
                   kw:kw + stride * (ow - 1) + 1:stride] += cols[:, kd, kh, kw]
    return np.ascontiguousarray(xp[:, 1:-1, 1:-1, 1:-1])
