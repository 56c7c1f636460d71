"""Pure-numpy convolution kernels: patch gather (im2col) and scatter-add (col2im).

These mirror the compiled extension in ``_convext.pyx`` exactly; the package
selects one implementation at import time (see ``kernels/__init__.py``).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def out_extent(size, kernel, stride, pad):
    """Output extent of a cross-correlation along one axis."""
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x, kh, kw, sh, sw, ph, pw):
    """Gather sliding patches of ``x`` [B,C,H,W] into [B, C*kh*kw, OH*OW]."""
    b, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, c, h, w, kh, kw, sh, sw, ph, pw):
    """Scatter-add patch columns [B, C*kh*kw, OH*OW] back onto [B,C,H,W].

    Adjoint of :func:`im2col`: overlapping patch positions accumulate.
    """
    b = cols.shape[0]
    oh = out_extent(h, kh, sh, ph)
    ow = out_extent(w, kw, sw, pw)
    padded = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols6[:, :, i, j]
    if ph or pw:
        return np.ascontiguousarray(padded[:, :, ph : ph + h, pw : pw + w])
    return padded
