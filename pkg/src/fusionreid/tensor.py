"""Dense tensors with reverse-mode gradients on top of numpy.

Every differentiable operation records a tape node (parents + a backward
closure) on its output. ``Tensor.backward()`` topologically sorts the tape
and accumulates gradients into ``.grad`` buffers. Only float32/float64 data
is supported; tests run in float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ShapeError, UsageError
from .kernels import col2im, im2col, out_extent

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float64)


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise UsageError(f"expected a scalar tensor, got shape {self.data.shape}")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- tape ------------------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable tensor that requires it.

        The receiver must be a scalar (size 1); its seed gradient is 1.
        """
        if self.data.size != 1:
            self._non_scalar()
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward):
    """Build an output tensor, attaching the tape node only when needed."""
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- arithmetic -----------------------------------------------------------------


def add(a, b):
    a = _wrap(a, np.float64)
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    a = _wrap(a, np.float64)
    b = _wrap(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a = _wrap(a, np.float64)
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b):
    a = _wrap(a, np.float64)
    b = _wrap(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def power(a, exponent):
    """Elementwise ``a ** exponent``; the exponent may be a scalar Tensor."""
    if isinstance(exponent, Tensor):
        data = a.data ** exponent.data

        def backward(g):
            a._accumulate(_unbroadcast(g * exponent.data * a.data ** (exponent.data - 1.0), a.data.shape))
            exponent._accumulate(_unbroadcast(g * data * np.log(a.data), exponent.data.shape))

        return _node(data, (a, exponent), backward)

    data = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _node(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a):
    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def clamp_min(a, floor):
    """Elementwise max(a, floor); gradient passes where a >= floor."""
    data = np.maximum(a.data, floor)

    def backward(g):
        a._accumulate(g * (a.data >= floor))

    return _node(data, (a,), backward)


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            g_exp = np.asarray(g).reshape((1,) * a.data.ndim)
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g_exp, a.data.shape).copy())

    return _node(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape):
    old_shape = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old_shape} to {shape}") from e

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return _node(data, (a,), backward)


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {a.data.ndim}")
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _node(data, tuple(tensors), backward)


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _node(np.ascontiguousarray(a.data[idx]), (a,), backward)


def split(a, boundary, axis=0):
    """Split along ``axis`` at ``boundary`` into two tensors (inverse of concat)."""
    extent = a.data.shape[axis]
    if not 0 <= boundary <= extent:
        raise ShapeError(f"split boundary {boundary} outside extent {extent}")
    return slice_axis(a, axis, 0, boundary), slice_axis(a, axis, boundary, extent)


def index_select(a, indices, axis=0):
    """Gather rows along ``axis``; backward scatter-adds into duplicates."""
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, indices, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        moved = np.moveaxis(buf, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        a._accumulate(buf)

    return _node(data, (a,), backward)


# -- activations & normalizations -------------------------------------------------


def relu(a):
    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(np.maximum(a.data, 0), (a,), backward)


def prelu(a, slope, channel_axis=None):
    """PReLU with a learnable slope; ``slope`` is per-channel when axis given.

    ``slope`` has one entry per channel of ``channel_axis``, or a single
    entry applied everywhere when ``channel_axis`` is None.
    """
    if channel_axis is None:
        s = slope.data.reshape(())
    else:
        shape = [1] * a.data.ndim
        shape[channel_axis] = slope.data.size
        s = slope.data.reshape(shape)
    positive = a.data >= 0
    data = np.where(positive, a.data, s * a.data)

    def backward(g):
        a._accumulate(np.where(positive, g, s * g))
        gs = g * a.data * (~positive)
        if channel_axis is None:
            slope._accumulate(gs.sum().reshape(slope.data.shape))
        else:
            axes = tuple(ax for ax in range(a.data.ndim) if ax != channel_axis)
            slope._accumulate(gs.sum(axis=axes).reshape(slope.data.shape))

    return _node(data, (a, slope), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(g * (cdf + a.data * pdf))

    return _node(data, (a,), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _node(data, (a,), backward)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - log_z

    def backward(g):
        a._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), backward)


def softplus(a):
    """log(1 + exp(x)), computed stably for large |x|."""
    data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        a._accumulate(g / (1.0 + np.exp(-a.data)))

    return _node(data, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    data = gamma.data * normed + beta.data

    def backward(g):
        reduce_axes = tuple(range(a.data.ndim - 1))
        beta._accumulate(g.sum(axis=reduce_axes).reshape(beta.data.shape))
        gamma._accumulate((g * normed).sum(axis=reduce_axes).reshape(gamma.data.shape))
        gn = g * gamma.data
        term = gn - gn.mean(axis=-1, keepdims=True) - normed * (gn * normed).mean(axis=-1, keepdims=True)
        a._accumulate(term * inv_std)

    return _node(data, (a, gamma, beta), backward)


def batch_norm(a, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """Normalize per channel (axis 1) over batch + spatial axes.

    ``running_mean``/``running_var`` are plain ndarrays updated in place in
    training mode and read in eval mode. Gradients flow to a, gamma, beta.
    """
    if a.data.ndim < 2:
        raise ShapeError(f"batch_norm expects [B,C,...], got shape {a.data.shape}")
    reduce_axes = (0,) + tuple(range(2, a.data.ndim))
    param_shape = [1] * a.data.ndim
    param_shape[1] = a.data.shape[1]
    gamma_b = gamma.data.reshape(param_shape)
    beta_b = beta.data.reshape(param_shape)

    if training:
        if a.data.shape[0] < 2:
            raise ShapeError("batch_norm in training mode needs batch size >= 2")
        mu = a.data.mean(axis=reduce_axes, keepdims=True)
        centered = a.data - mu
        var = (centered * centered).mean(axis=reduce_axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1)
    else:
        mu = running_mean.reshape(param_shape)
        centered = a.data - mu
        var = running_var.reshape(param_shape)

    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    data = gamma_b * normed + beta_b
    n = a.data.size // a.data.shape[1]

    def backward(g):
        beta._accumulate(g.sum(axis=reduce_axes).reshape(beta.data.shape))
        gamma._accumulate((g * normed).sum(axis=reduce_axes).reshape(gamma.data.shape))
        gn = g * gamma_b
        if training:
            term = (
                gn
                - gn.sum(axis=reduce_axes, keepdims=True) / n
                - normed * (gn * normed).sum(axis=reduce_axes, keepdims=True) / n
            )
            a._accumulate(term * inv_std)
        else:
            a._accumulate(gn * inv_std)

    return _node(data, (a, gamma, beta), backward)


# -- linear & convolution -----------------------------------------------------------


def linear(x, weight, bias=None):
    """Affine map over the last axis: y = x @ W (+ b); W is [In, Out]."""
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear: input last extent {x.data.shape} does not match weight {weight.data.shape}"
        )
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def _conv_prepare(x, kh, kw, stride, padding):
    b, c, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"kernel ({kh},{kw}) larger than padded input ({h + 2 * padding},{w + 2 * padding})"
        )
    oh = out_extent(h, kh, stride, padding)
    ow = out_extent(w, kw, stride, padding)
    return b, c, h, w, oh, ow


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Standard cross-correlation; x [B,C,H,W] (or [C,H,W]), weight [O,C,kh,kw]."""
    squeeze = x.data.ndim == 3
    xb = reshape(x, (1,) + x.data.shape) if squeeze else x
    cout, cin, kh, kw = weight.data.shape
    b, c, h, w, oh, ow = _conv_prepare(xb.data, kh, kw, stride, padding)
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cin}")

    cols = im2col(np.ascontiguousarray(xb.data), kh, kw, stride, stride, padding, padding)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out_data = (w2 @ cols).reshape(b, cout, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (xb, weight) if bias is None else (xb, weight, bias)

    def backward(g):
        g2 = g.reshape(b, cout, oh * ow)
        grad_w = np.einsum("bol,bkl->ok", g2, cols).reshape(weight.data.shape)
        weight._accumulate(grad_w)
        if bias is not None:
            bias._accumulate(g2.sum(axis=(0, 2)))
        grad_cols = np.ascontiguousarray(np.einsum("ok,bol->bkl", w2, g2))
        xb._accumulate(col2im(grad_cols, c, h, w, kh, kw, stride, stride, padding, padding))

    out = _node(out_data, parents, backward)
    return reshape(out, out.data.shape[1:]) if squeeze else out


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel cross-correlation; weight [C,kh,kw], one kernel per channel."""
    squeeze = x.data.ndim == 3
    xb = reshape(x, (1,) + x.data.shape) if squeeze else x
    cw, kh, kw = weight.data.shape
    b, c, h, w, oh, ow = _conv_prepare(xb.data, kh, kw, stride, padding)
    if c != cw:
        raise ShapeError(f"depthwise conv: input channels {c} != kernel channels {cw}")

    cols = im2col(np.ascontiguousarray(xb.data), kh, kw, stride, stride, padding, padding)
    cols4 = cols.reshape(b, c, kh * kw, oh * ow)
    w2 = weight.data.reshape(c, kh * kw)
    out_data = np.einsum("ck,bckl->bcl", w2, cols4).reshape(b, c, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, c, 1, 1)

    parents = (xb, weight) if bias is None else (xb, weight, bias)

    def backward(g):
        g2 = g.reshape(b, c, oh * ow)
        weight._accumulate(np.einsum("bcl,bckl->ck", g2, cols4).reshape(weight.data.shape))
        if bias is not None:
            bias._accumulate(g2.sum(axis=(0, 2)))
        grad_cols = np.einsum("ck,bcl->bckl", w2, g2).reshape(b, c * kh * kw, oh * ow)
        xb._accumulate(
            col2im(np.ascontiguousarray(grad_cols), c, h, w, kh, kw, stride, stride, padding, padding)
        )

    out = _node(out_data, parents, backward)
    return reshape(out, out.data.shape[1:]) if squeeze else out


def convolve(x, kernel, mode="standard", bias=None, stride=1, padding=0):
    """Mode-dispatching convolution front end.

    standard:  kernel [O, C, kh, kw]
    depthwise: kernel [C, kh, kw] (one per channel, C preserved)
    pointwise: kernel [O, C, 1, 1]
    """
    if mode == "standard":
        return conv2d(x, kernel, bias=bias, stride=stride, padding=padding)
    if mode == "depthwise":
        return depthwise_conv2d(x, kernel, bias=bias, stride=stride, padding=padding)
    if mode == "pointwise":
        if kernel.data.shape[-2:] != (1, 1):
            raise ShapeError(f"pointwise kernel must be 1x1, got {kernel.data.shape}")
        return conv2d(x, kernel, bias=bias, stride=stride, padding=padding)
    raise UsageError(f"unknown convolution mode {mode!r}")


def gem_pool(x, p, eps=1e-6):
    """Generalized-mean pooling over the trailing spatial axes.

    x is [C,H,W] or [B,C,H,W]; p is a positive scalar Tensor (learnable).
    Values are clamped to >= eps before exponentiation.
    """
    if float(p.data.reshape(-1)[0]) <= 0:
        raise UsageError("gem_pool exponent p must be > 0")
    clamped = clamp_min(x, eps)
    powered = power(clamped, p)
    pooled = mean(powered, axis=(-2, -1))
    return power(pooled, div(_wrap(1.0, p.dtype), p))
