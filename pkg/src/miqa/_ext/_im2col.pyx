# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled patch gather/scatter for channels-last 2-D convolution.

Inputs are (N, H, W, C). The column buffer is (N*OH*OW, KH*KW*C) with the
channel index fastest. ``col2im`` accumulates each pixel's contributions in
descending (i, j) kernel order starting from zero, the same order as the numpy
fallback, so both backends agree bit for bit.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


cdef void _gather(const floating* x, floating* cols, Py_ssize_t n, Py_ssize_t h,
                  Py_ssize_t w, Py_ssize_t c, int kh, int kw, int stride, int pad,
                  Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t b, oy, ox, i, j, iy, ix
    cdef floating* dst = cols
    cdef size_t chunk = c * sizeof(floating)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        memset(dst, 0, kw * chunk)
                        dst += kw * c
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w:
                            memset(dst, 0, chunk)
                        else:
                            memcpy(dst, x + ((b * h + iy) * w + ix) * c, chunk)
                        dst += c


cdef void _scatter(const floating* cols, floating* dx, Py_ssize_t n, Py_ssize_t h,
                   Py_ssize_t w, Py_ssize_t c, int kh, int kw, int stride, int pad,
                   Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    # reads cols sequentially; per pixel this visits (i, j) in descending order
    cdef Py_ssize_t b, oy, ox, i, j, iy, ix, ch
    cdef const floating* src = cols
    cdef floating* px
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        src += kw * c
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if 0 <= ix < w:
                            px = dx + ((b * h + iy) * w + ix) * c
                            for ch in range(c):
                                px[ch] = px[ch] + src[ch]
                        src += c


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n * oh * ow, kh * kw * c), dtype=dtype)
    cdef floating[:, ::1] cols = out
    if out.size:
        with nogil:
            _gather(&x[0, 0, 0, 0], &cols[0, 0], n, h, w, c, kh, kw, stride, pad, oh, ow)
    return out


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t c, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if cols.shape[0] != n * oh * ow or cols.shape[1] != kh * kw * c:
        raise ValueError("column buffer does not match the requested geometry")
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    if out.size and cols.shape[0]:
        with nogil:
            _scatter(&cols[0, 0], &dx[0, 0, 0, 0], n, h, w, c, kh, kw, stride, pad, oh, ow)
    return out
