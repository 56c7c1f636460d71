"""Layer modules and the parameter registry.

A Module owns parameters (Tensors with requires_grad), non-trainable buffers
(plain ndarrays, e.g. BatchNorm running stats) and submodules. Assigning a
Tensor/Module attribute registers it automatically; construction order plus
a caller-supplied numpy Generator makes initialization bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def add_module(self, name, module):
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, flag=True):
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class ParamStore:
    """Lexicographically ordered map from dotted path to parameter tensor.

    Parameter paths are unique; iteration order is sorted by path so that
    optimizer traversal and checkpoint layout are reproducible.
    """

    def __init__(self, named):
        items = sorted(named)
        paths = [path for path, _ in items]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise ConfigError(f"duplicate parameter paths: {dupes}")
        self._store = dict(items)

    @classmethod
    def from_module(cls, module):
        return cls(module.named_parameters())

    def __iter__(self):
        return iter(self._store.items())

    def __len__(self):
        return len(self._store)

    def __getitem__(self, path):
        return self._store[path]

    def __contains__(self, path):
        return path in self._store

    def paths(self):
        return list(self._store)

    def total_count(self):
        return sum(p.data.size for p in self._store.values())


def _param(rng, shape, std, dtype):
    if std == 0.0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """y = x @ W + b over the last axis; W is [in_features, out_features]."""

    def __init__(self, in_features, out_features, rng, bias=True, std=None, dtype=np.float64):
        super().__init__()
        std = np.sqrt(1.0 / in_features) if std is None else std
        self.weight = _param(rng, (in_features, out_features), std, dtype)
        self.bias = _param(rng, (out_features,), 0.0, dtype) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
                 bias=True, dtype=np.float64):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = _param(rng, (out_channels, in_channels, kernel_size, kernel_size),
                             np.sqrt(2.0 / fan_in), dtype)
        self.bias = _param(rng, (out_channels,), 0.0, dtype) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel_size, rng, stride=1, padding=0, bias=True, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _param(rng, (channels, kernel_size, kernel_size),
                             np.sqrt(2.0 / (kernel_size * kernel_size)), dtype)
        self.bias = _param(rng, (channels,), 0.0, dtype) if bias else None

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Channel-axis batch normalization for [B,C,...] inputs."""

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, eps=self.eps, momentum=self.momentum)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class PReLU(Module):
    """One learnable slope per channel, initialized 0.25."""

    def __init__(self, channels, channel_axis=1, init=0.25, dtype=np.float64):
        super().__init__()
        self.channel_axis = channel_axis
        self.slope = Tensor(np.full(channels, init, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.prelu(x, self.slope, channel_axis=self.channel_axis)


class GeMPool(Module):
    """Generalized-mean pooling with a learnable exponent (p=3 at init)."""

    def __init__(self, p=3.0, eps=1e-6, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.p = Tensor(np.asarray(p, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.gem_pool(x, self.p, eps=self.eps)


class FeedForward(Module):
    """Two linear projections with GELU in between (transformer FFN)."""

    def __init__(self, dim, hidden_dim, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(dim, hidden_dim, rng, dtype=dtype)
        self.fc2 = Linear(hidden_dim, dim, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2.forward(T.gelu(self.fc1.forward(x)))


class MultiHeadSelfAttention(Module):
    """Standard MHSA over [B,T,D] with an output projection.

    When ``capture`` is set (a list), each forward appends the per-head
    attention weights [B, heads, T, T] as a plain ndarray.
    """

    def __init__(self, dim, num_heads, rng, dtype=np.float64):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)
        self.capture = None

    def _split_heads(self, x, b, t):
        return T.permute(T.reshape(x, (b, t, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, x):
        b, t, d = x.data.shape
        q = self._split_heads(self.wq.forward(x), b, t)
        k = self._split_heads(self.wk.forward(x), b, t)
        v = self._split_heads(self.wv.forward(x), b, t)
        scores = T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        if self.capture is not None:
            self.capture.append(attn.data.copy())
        out = T.matmul(attn, v)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (b, t, d))
        return self.wo.forward(out)
