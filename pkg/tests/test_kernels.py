"""Compiled and pure-numpy convolution kernels must agree exactly."""

import numpy as np
import pytest

from fusionreid.kernels import BACKEND, _impl, reference


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2), (2, 0)])
@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_im2col_backends_agree(stride, pad, k, dtype):
    rng = np.random.default_rng(42)
    x = rng.standard_normal((2, 3, 9, 7)).astype(dtype)
    got = _impl.im2col(x, k, k, stride, stride, pad, pad)
    want = reference.im2col(x, k, k, stride, stride, pad, pad)
    assert got.dtype == want.dtype == dtype
    np.testing.assert_array_equal(got, want)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_col2im_backends_agree(stride, pad):
    rng = np.random.default_rng(3)
    c, h, w, k = 4, 8, 6, 3
    oh = reference.out_extent(h, k, stride, pad)
    ow = reference.out_extent(w, k, stride, pad)
    cols = np.ascontiguousarray(rng.standard_normal((2, c * k * k, oh * ow)))
    got = _impl.col2im(cols, c, h, w, k, k, stride, stride, pad, pad)
    want = reference.col2im(cols, c, h, w, k, k, stride, stride, pad, pad)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", [_impl, reference])
def test_col2im_is_adjoint_of_im2col(impl):
    # <im2col(x), c> == <x, col2im(c)> characterizes the scatter as the exact
    # adjoint of the gather, which is what conv backward relies on.
    rng = np.random.default_rng(11)
    x = np.ascontiguousarray(rng.standard_normal((2, 3, 7, 6)))
    cols = impl.im2col(x, 3, 3, 2, 2, 1, 1)
    c = np.ascontiguousarray(rng.standard_normal(cols.shape))
    back = impl.col2im(c, 3, 7, 6, 3, 3, 2, 2, 1, 1)
    assert np.dot(cols.ravel(), c.ravel()) == pytest.approx(np.dot(x.ravel(), back.ravel()), rel=1e-12)


def test_backend_label():
    assert BACKEND in ("cython", "numpy")
