# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im for 3x3x3 pad-1 convolution (same layout as _kernels_py)."""
import numpy as np
cimport cython
from cython.parallel cimport prange

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t s) noexcept nogil:
    return (n + 2 - 3) // s + 1


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t s) noexcept nogil:
    # first output index o with o*s + k - 1 >= 0
    return 1 if k == 0 else 0


cdef inline Py_ssize_t _hi(Py_ssize_t n, Py_ssize_t o, Py_ssize_t k, Py_ssize_t s) noexcept nogil:
    # one past the last output index o with o*s + k - 1 < n
    if n < k:
        return 0
    cdef Py_ssize_t m = (n - k) // s + 1
    return m if m < o else o


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, Py_ssize_t s):
    cdef Py_ssize_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OD = _out(D, s), OH = _out(H, s), OW = _out(W, s)
    cdef Py_ssize_t c, kd, kh, kw, od, oh, ow, zd, zh, row, base, lo, hi
    for c in prange(C, nogil=True, schedule="static"):
        for kd in range(3):
            for kh in range(3):
                for kw in range(3):
                    row = ((c * 3 + kd) * 3 + kh) * 3 + kw
                    lo = _lo(kw, s)
                    hi = _hi(W, OW, kw, s)
                    for od in range(OD):
                        zd = od * s + kd - 1
                        for oh in range(OH):
                            zh = oh * s + kh - 1
                            base = (od * OH + oh) * OW
                            if zd < 0 or zd >= D or zh < 0 or zh >= H:
                                for ow in range(OW):
                                    cols[row, base + ow] = 0
                                continue
                            for ow in range(lo):
                                cols[row, base + ow] = 0
                            for ow in range(lo, hi):
                                cols[row, base + ow] = x[c, zd, zh, ow * s + kw - 1]
                            for ow in range(hi, OW):
                                cols[row, base + ow] = 0


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] x, Py_ssize_t s):
    cdef Py_ssize_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OD = _out(D, s), OH = _out(H, s), OW = _out(W, s)
    cdef Py_ssize_t c, kd, kh, kw, od, oh, ow, zd, zh, row, base, lo, hi
    for c in prange(C, nogil=True, schedule="static"):
        for kd in range(3):
            for kh in range(3):
                for kw in range(3):
                    row = ((c * 3 + kd) * 3 + kh) * 3 + kw
                    lo = _lo(kw, s)
                    hi = _hi(W, OW, kw, s)
                    for od in range(OD):
                        zd = od * s + kd - 1
                        if zd < 0 or zd >= D:
                            continue
                        for oh in range(OH):
                            zh = oh * s + kh - 1
                            if zh < 0 or zh >= H:
                                continue
                            base = (od * OH + oh) * OW
                            for ow in range(lo, hi):
                                x[c, zd, zh, ow * s + kw - 1] += cols[row, base + ow]


def im2col3d(x, stride):
    x = np.ascontiguousarray(x)
    c, d, h, w = x.shape
    p = _out(d, stride) * _out(h, stride) * _out(w, stride)
    cols = np.empty((c * 27, p), dtype=x.dtype)
    _im2col(x, cols, stride)
    return cols


def col2im3d(cols, shape, stride):
    cols = np.ascontiguousarray(cols)
    x = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, x, stride)
    return x
