"""Tensor backend: forward values against hand oracles, gradients against
central differences (the independent oracle for every differentiable op)."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionreid import tensor as T
from fusionreid.errors import ShapeError, UsageError
from fusionreid.gradcheck import check_gradients, leaf
from fusionreid.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- linear ---------------------------------------------------------------


def test_linear_identity():
    x = Tensor([1.0, 2.0])
    y = T.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(y.data, [1.0, 2.0])


def test_linear_affine_value():
    # [1,1] @ [[1],[1]] + [0.5] = [2.5]
    y = T.linear(Tensor([1.0, 1.0]), Tensor([[1.0], [1.0]]), Tensor([0.5]))
    np.testing.assert_allclose(y.data, [2.5])


def test_linear_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3, 4\)"):
        T.linear(Tensor([1.0, 2.0]), Tensor(np.zeros((3, 4))))


def test_linear_weight_grad_matches_finite_differences(rng):
    x = leaf(None, rng, (3, 4))
    w = leaf(None, rng, (4, 5))
    check_gradients(lambda: T.sum_(T.linear(x, w)), [w, x], h=1e-5, rel_tol=1e-4)


# -- convolve -------------------------------------------------------------


def test_depthwise_identity_kernel():
    x = Tensor(np.arange(12.0).reshape(2, 3, 2))
    y = T.convolve(x, Tensor(np.ones((2, 1, 1))), mode="depthwise")
    np.testing.assert_allclose(y.data, x.data)


def test_pointwise_sums_constant_planes():
    x = Tensor(np.stack([np.full((3, 3), 1.0), np.full((3, 3), 2.0)]))
    kernel = Tensor(np.ones((1, 2, 1, 1)))
    y = T.convolve(x, kernel, mode="pointwise")
    np.testing.assert_allclose(y.data, np.full((1, 3, 3), 3.0))


def test_depthwise_3x3_ones_on_ones_counts_window_overlap():
    x = Tensor(np.ones((1, 3, 3)))
    y = T.convolve(x, Tensor(np.ones((1, 3, 3))), mode="depthwise", padding=1)
    expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    np.testing.assert_allclose(y.data[0], expected)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError):
        T.convolve(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), mode="standard")


def test_pointwise_rejects_non_1x1():
    with pytest.raises(ShapeError):
        T.convolve(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), mode="pointwise")


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(rng, stride, pad):
    x = leaf(None, rng, (2, 3, 6, 5))
    w = leaf(None, rng, (4, 3, 3, 3))
    b = leaf(None, rng, (4,))
    fn = lambda: T.sum_(T.power(T.conv2d(x, w, b, stride=stride, padding=pad), 2.0))
    check_gradients(fn, [x, w, b], rel_tol=1e-4)


def test_depthwise_gradients(rng):
    x = leaf(None, rng, (2, 3, 5, 4))
    w = leaf(None, rng, (3, 3, 3))
    fn = lambda: T.sum_(T.power(T.depthwise_conv2d(x, w, stride=2, padding=1), 2.0))
    check_gradients(fn, [x, w], rel_tol=1e-4)


# -- batch_norm -----------------------------------------------------------


def _bn(x, gamma, beta, training=True, eps=1e-5):
    c = x.shape[1]
    return T.batch_norm(
        Tensor(x), Tensor(np.full(c, float(gamma))), Tensor(np.full(c, float(beta))),
        np.zeros(c), np.ones(c), training=training, eps=eps,
    )


def test_batch_norm_constant_channel_is_zero():
    out = _bn(np.full((4, 2, 3), 7.0), gamma=1, beta=0)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batch_norm_unit_variance_pair():
    out = _bn(np.array([[-1.0], [1.0]]), gamma=1, beta=0, eps=1e-14)
    np.testing.assert_allclose(out.data, [[-1.0], [1.0]], atol=1e-6)


def test_batch_norm_affine_collapse():
    out = _bn(np.random.default_rng(0).standard_normal((4, 3)), gamma=0, beta=5)
    np.testing.assert_allclose(out.data, 5.0)


def test_batch_norm_rejects_singleton_batch():
    with pytest.raises(ShapeError):
        _bn(np.ones((1, 2)), gamma=1, beta=0, training=True)


def test_batch_norm_running_stats_drive_eval(rng):
    x = rng.standard_normal((6, 3, 2, 2))
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    T.batch_norm(Tensor(x), gamma, beta, rm, rv, training=True, momentum=1.0)
    want_mean = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, want_mean, atol=1e-12)
    out = T.batch_norm(Tensor(x), gamma, beta, rm, rv, training=False)
    manual = (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5)
    np.testing.assert_allclose(out.data, manual, atol=1e-12)


def test_batch_norm_gradients(rng):
    x = leaf(None, rng, (4, 3, 2, 2))
    gamma, beta = leaf(None, rng, (3,)), leaf(None, rng, (3,))
    proj = Tensor(rng.standard_normal((4, 3, 2, 2)))
    rm, rv = np.zeros(3), np.ones(3)
    fn = lambda: T.sum_(T.mul(T.batch_norm(x, gamma, beta, rm, rv, training=True), proj))
    check_gradients(fn, [x, gamma, beta], rel_tol=1e-4)


# -- layer_norm -----------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    out = T.layer_norm(Tensor(np.full((3, 4), 2.5)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_unit_pair():
    out = T.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)


def test_layer_norm_empty_axis_rejected():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


def test_layer_norm_moments_property(rng):
    x = Tensor(rng.standard_normal((5, 16)))
    beta_val = 0.7
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.full(16, beta_val)))
    np.testing.assert_allclose(out.data.mean(axis=-1), beta_val, atol=1e-6)
    pre_affine = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(np.abs(pre_affine.data.mean(axis=-1)), 0.0, atol=1e-6)
    np.testing.assert_allclose(pre_affine.data.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_gradients(rng):
    x = leaf(None, rng, (3, 6))
    gamma, beta = leaf(None, rng, (6,)), leaf(None, rng, (6,))
    proj = Tensor(rng.standard_normal((3, 6)))
    fn = lambda: T.sum_(T.mul(T.layer_norm(x, gamma, beta), proj))
    check_gradients(fn, [x, gamma, beta], rel_tol=1e-4)


# -- softmax --------------------------------------------------------------


def test_softmax_uniform_on_zeros():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25)


def test_softmax_log3_case():
    out = T.softmax(Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    vals=st.lists(st.floats(-50, 50), min_size=2, max_size=8),
    shift=st.floats(-100, 100),
)
def test_softmax_shift_invariance(vals, shift):
    x = np.asarray(vals)
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert np.all(a > 0)
    assert a.sum() == pytest.approx(1.0, abs=1e-6)


def test_softmax_rows_sum_to_one(rng):
    out = T.softmax(Tensor(rng.standard_normal((5, 7)) * 30.0), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out.data > 0)


# -- activations ----------------------------------------------------------


def test_prelu_values():
    slope = Tensor(np.array([0.25]))
    assert T.prelu(Tensor([2.0]), slope, channel_axis=0).data[0] == pytest.approx(2.0)
    assert T.prelu(Tensor([-1.0]), slope, channel_axis=0).data[0] == pytest.approx(-0.25)


def test_gelu_zero_center():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_matches_gaussian_cdf():
    x = np.array([-2.0, -0.5, 0.3, 1.7])
    from scipy.stats import norm

    np.testing.assert_allclose(T.gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-12)


def test_relu_and_prelu_gradients(rng):
    x = leaf(None, rng, (2, 3, 4))
    slope = leaf(np.full(3, 0.25))
    proj = Tensor(rng.standard_normal((2, 3, 4)))
    check_gradients(lambda: T.sum_(T.mul(T.prelu(x, slope, 1), proj)), [x, slope], rel_tol=1e-4)
    check_gradients(lambda: T.sum_(T.mul(T.relu(x), proj)), [x], rel_tol=1e-4)
    check_gradients(lambda: T.sum_(T.gelu(x)), [x], rel_tol=1e-4)


# -- gem_pool -------------------------------------------------------------


def test_gem_p1_is_arithmetic_mean():
    x = Tensor(np.array([[[1.0], [3.0]]]))  # one channel, 2x1 spatial
    out = T.gem_pool(x, Tensor(np.asarray(1.0)))
    assert out.data[0] == pytest.approx(2.0, abs=1e-9)


def test_gem_p2_value():
    x = Tensor(np.array([[[1.0], [3.0]]]))
    out = T.gem_pool(x, Tensor(np.asarray(2.0)))
    assert out.data[0] == pytest.approx(math.sqrt(5.0), abs=1e-9)


def test_gem_large_p_approaches_max():
    x = Tensor(np.array([[[1.0], [3.0]]]))
    out = T.gem_pool(x, Tensor(np.asarray(64.0)))
    assert abs(out.data[0] - 3.0) < 0.05


def test_gem_p1_equals_mean_pooling(rng):
    x = np.abs(rng.standard_normal((4, 3, 5))) + 0.01
    out = T.gem_pool(Tensor(x), Tensor(np.asarray(1.0)))
    np.testing.assert_allclose(out.data, x.mean(axis=(-2, -1)), atol=1e-9)


def test_gem_rejects_nonpositive_p():
    with pytest.raises(UsageError):
        T.gem_pool(Tensor(np.ones((1, 2, 2))), Tensor(np.asarray(-1.0)))


def test_gem_gradients_flow_to_x_and_p(rng):
    x = leaf(np.abs(rng.standard_normal((2, 3, 4, 3))) + 0.1)
    p = leaf(np.asarray(2.5))
    check_gradients(lambda: T.sum_(T.gem_pool(x, p)), [x, p], rel_tol=1e-4)


# -- shape ops -------------------------------------------------------------


def test_reshape_round_trip(rng):
    x = rng.standard_normal((6, 8))
    t = Tensor(x)
    back = T.reshape(T.reshape(t, (6, 2, 4)), (6, 8))
    np.testing.assert_array_equal(back.data, x)


def test_concat_split_inverse():
    a, b = Tensor([1.0]), Tensor([2.0])
    joined = T.concat([a, b], axis=0)
    left, right = T.split(joined, 1, axis=0)
    np.testing.assert_array_equal(left.data, a.data)
    np.testing.assert_array_equal(right.data, b.data)


def test_permute_inverse_is_identity(rng):
    x = rng.standard_normal((2, 3, 4))
    perm = (2, 0, 1)
    inverse = tuple(np.argsort(perm))
    out = T.permute(T.permute(Tensor(x), perm), inverse)
    np.testing.assert_array_equal(out.data, x)


def test_reshape_rejects_bad_extent():
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_concat_rejects_mismatched_axes():
    with pytest.raises(ValueError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


# -- backward contract -------------------------------------------------------


def test_backward_sum_is_ones(rng):
    x = leaf(None, rng, (3, 4))
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic(rng):
    x = leaf(None, rng, (5,))
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(UsageError):
        leaf(None, rng, (3,)).backward()


def test_grad_accumulates_across_reuse(rng):
    x = leaf(None, rng, (4,))
    y = T.add(T.sum_(T.mul(x, x)), T.sum_(x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1.0, atol=1e-12)


def test_forward_outputs_finite_for_finite_inputs(rng):
    x = Tensor(rng.standard_normal((3, 8)) * 100.0)
    for out in (T.softmax(x), T.log_softmax(x), T.softplus(x), T.gelu(x)):
        assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("trial", range(20))
def test_random_composite_gradcheck_trials(trial):
    # 20 random end-to-end trials through a mixed op chain.
    rng = np.random.default_rng(1000 + trial)
    x = leaf(None, rng, (2, 6))
    w = leaf(None, rng, (6, 4))
    gamma, beta = leaf(np.ones(4)), leaf(np.zeros(4))

    def fn():
        h = T.gelu(T.linear(x, w))
        h = T.layer_norm(h, gamma, beta)
        return T.sum_(T.mul(T.softmax(h), h))

    check_gradients(fn, [x, w, gamma, beta], rel_tol=1e-4)
