# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels: patch gather (im2col) and scatter-add (col2im).

Behaviour is identical to ``reference.py``; this version avoids the padded
temporaries and strided fancy-indexing of the numpy path.
"""

import numpy as np

cimport cython

BACKEND = "cython"

ctypedef fused real:
    float
    double


def out_extent(Py_ssize_t size, Py_ssize_t kernel, Py_ssize_t stride, Py_ssize_t pad):
    """Output extent of a cross-correlation along one axis."""
    return (size + 2 * pad - kernel) // stride + 1


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ph, Py_ssize_t pw):
    """Gather sliding patches of ``x`` [B,C,H,W] into [B, C*kh*kw, OH*OW]."""
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if real is double:
        dtype = np.float64
    else:
        dtype = np.float32
    out_arr = np.zeros((b, c * kh * kw, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, oi, oj, row, hi, wj
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oi in range(oh):
                            hi = oi * sh + i - ph
                            if hi < 0 or hi >= h:
                                continue
                            for oj in range(ow):
                                wj = oj * sw + j - pw
                                if 0 <= wj < w:
                                    out[bi, row, oi * ow + oj] = x[bi, ci, hi, wj]
    return out_arr


def col2im(real[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
           Py_ssize_t ph, Py_ssize_t pw):
    """Scatter-add patch columns [B, C*kh*kw, OH*OW] back onto [B,C,H,W].

    Adjoint of :func:`im2col`: overlapping patch positions accumulate.
    """
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if real is double:
        dtype = np.float64
    else:
        dtype = np.float32
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, oi, oj, row, hi, wj
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oi in range(oh):
                            hi = oi * sh + i - ph
                            if hi < 0 or hi >= h:
                                continue
                            for oj in range(ow):
                                wj = oj * sw + j - pw
                                if 0 <= wj < w:
                                    out[bi, ci, hi, wj] += cols[bi, row, oi * ow + oj]
    return out_arr
