"""Dual-branch feature extraction: a small residual CNN and a small ViT.

The CNN yields a convolutional map plus its GeM-pooled global vector; the
ViT yields patch tokens plus the class-token output. A learnable per-camera
embedding, scaled by ``camera_scale``, is added to every ViT token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError
from .nn import (
    BatchNorm,
    Conv2d,
    FeedForward,
    GeMPool,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
)
from .tensor import Tensor


@dataclass
class BranchOutput:
    """Spatial features plus the branch's supervised global vector.

    ``feature_map`` is [B, D_c, H, W] for the CNN branch or [B, D_t, N] for
    the transformer branch (class token excluded); ``global_vec`` is [B, D].
    """

    feature_map: Tensor
    global_vec: Tensor


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self.add_module(str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _as_batched_images(images, dtype):
    """Accept [3,H,W] or [B,3,H,W], ndarray or Tensor; report if squeezed."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=dtype))
    squeeze = images.data.ndim == 3
    if squeeze:
        images = T.reshape(images, (1,) + images.data.shape)
    return images, squeeze


class ResidualBlock(Module):
    def __init__(self, in_ch, out_ch, stride, rng, dtype=np.float64):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride, bias=False, dtype=dtype)
            self.proj_bn = BatchNorm(out_ch, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x):
        h = T.relu(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        shortcut = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return T.relu(T.add(h, shortcut))


class ToyCnn(Module):
    """Residual CNN branch; output grid is image_size / total stride."""

    def __init__(self, cfg, image_size, rng, dtype=np.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.out_grid = cfg.output_grid(image_size)
        self.out_channels = cfg.out_channels
        first = cfg.stage_channels[0]
        self.stem_conv = Conv2d(3, first, 3, rng, stride=cfg.stem_stride, padding=1, bias=False, dtype=dtype)
        self.stem_bn = BatchNorm(first, dtype=dtype)
        stages = []
        in_ch = first
        for ch, blocks, stride in zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.stage_strides()):
            blocks_list = []
            for b in range(blocks):
                blocks_list.append(ResidualBlock(in_ch, ch, stride if b == 0 else 1, rng, dtype=dtype))
                in_ch = ch
            stages.append(ModuleList(blocks_list))
        self.stages = ModuleList(stages)
        self.gem = GeMPool(dtype=dtype)

    def forward(self, images):
        x, squeeze = _as_batched_images(images, self.dtype)
        h = T.relu(self.stem_bn.forward(self.stem_conv.forward(x)))
        for stage in self.stages:
            for block in stage:
                h = block.forward(h)
        pooled = self.gem.forward(h)
        if squeeze:
            return BranchOutput(T.reshape(h, h.data.shape[1:]), T.reshape(pooled, pooled.data.shape[1:]))
        return BranchOutput(h, pooled)


class VitBlock(Module):
    def __init__(self, dim, heads, mlp_ratio, rng, dtype=np.float64):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, int(dim * mlp_ratio), rng, dtype=dtype)

    def forward(self, x):
        x = T.add(x, self.attn.forward(self.ln1.forward(x)))
        return T.add(x, self.ffn.forward(self.ln2.forward(x)))


class ToyVit(Module):
    """ViT branch with class token, camera embedding and pre-norm encoder."""

    def __init__(self, cfg, image_size, rng, dtype=np.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.grid = cfg.patch_grid(image_size)
        self.num_tokens = self.grid[0] * self.grid[1]
        d = cfg.embed_dim
        self.patch_proj = Linear(3 * cfg.patch_size * cfg.patch_size, d, rng, dtype=dtype)
        self.cls_token = Tensor(np.zeros((1, 1, d), dtype=dtype), requires_grad=True)
        self.pos_embed = Tensor(
            (rng.standard_normal((1, 1 + self.num_tokens, d)) * 0.02).astype(dtype), requires_grad=True
        )
        self.cam_table = Tensor(
            (rng.standard_normal((cfg.num_cameras, d)) * 0.02).astype(dtype), requires_grad=True
        )
        self.blocks = ModuleList(
            VitBlock(d, cfg.heads, cfg.mlp_ratio, rng, dtype=dtype) for _ in range(cfg.depth)
        )

    def patch_embed(self, images):
        """Linear projection of flattened patches -> [B, N, D]."""
        x, squeeze = _as_batched_images(images, self.dtype)
        b = x.data.shape[0]
        p, s = self.cfg.patch_size, self.cfg.patch_stride
        from .kernels import im2col

        patches = im2col(np.ascontiguousarray(x.data), p, p, s, s, 0, 0)  # [B, 3*p*p, N]
        patches_t = Tensor(np.ascontiguousarray(patches.transpose(0, 2, 1)))
        tokens = self.patch_proj.forward(patches_t)  # [B, N, D]
        return tokens, squeeze

    def add_camera_embedding(self, seq, cam_ids):
        """Add the per-camera row, scaled by camera_scale, to every token."""
        lam = self.cfg.camera_scale
        if lam == 0.0:
            return seq
        cam_ids = np.asarray(cam_ids, dtype=np.intp).reshape(-1)
        if cam_ids.min() < 0 or cam_ids.max() >= self.cfg.num_cameras:
            raise DataError(
                f"camera id out of range [0, {self.cfg.num_cameras}): {cam_ids.tolist()}"
            )
        rows = T.index_select(self.cam_table, cam_ids, axis=0)  # [B, D]
        rows = T.reshape(rows, (len(cam_ids), 1, self.cam_table.data.shape[1]))
        return T.add(seq, T.mul(rows, lam))

    def forward(self, images, cam_ids):
        tokens, squeeze = self.patch_embed(images)
        b, n, d = tokens.data.shape
        cls = T.add(Tensor(np.zeros((b, 1, d), dtype=self.dtype)), self.cls_token)
        seq = T.concat([cls, tokens], axis=1)
        seq = T.add(seq, self.pos_embed)
        cam_arr = np.asarray(cam_ids).reshape(-1)
        if cam_arr.size == 1 and b > 1:
            cam_arr = np.full(b, cam_arr[0])
        seq = self.add_camera_embedding(seq, cam_arr)
        for block in self.blocks:
            seq = block.forward(seq)
        cls_out, patch_out = T.split(seq, 1, axis=1)
        global_vec = T.reshape(cls_out, (b, d))
        feature_map = T.permute(patch_out, (0, 2, 1))  # [B, D, N]
        if squeeze:
            return BranchOutput(
                T.reshape(feature_map, feature_map.data.shape[1:]),
                T.reshape(global_vec, (d,)),
            )
        return BranchOutput(feature_map, global_vec)
