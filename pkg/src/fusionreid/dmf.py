"""Dual-attention mutual fusion.

Two refinement convolutions (one per branch) align channel count and grid,
then a stack of transmission layers evolves one global token per branch:
each layer re-encodes [global; initial refined locals] with a self-attention
unit whose weights serve both branches, and cross-attends each branch's
global token over the *other* branch's encoded locals. The refined local
tokens from the alignment step are recycled at every layer; only the globals
move forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .nn import (
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    FeedForward,
    GeMPool,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    ParamStore,
    PReLU,
)
from .backbones import ModuleList
from .tensor import Tensor


@dataclass
class RefinedPair:
    """Aligned branch maps [B,D,H,W] plus their GeM global vectors [B,D]."""

    map_cnn: Tensor
    map_vit: Tensor
    vec_cnn: Tensor
    vec_vit: Tensor


@dataclass
class HtmState:
    """Per-layer evolving global tokens; ``layer`` counts completed steps."""

    layer: int
    vec_cnn: Tensor
    vec_vit: Tensor


def _pick_stride(in_extent, out_extent):
    # depthwise 3x3 pad 1: out = floor((in - 1) / s) + 1 = ceil(in / s)
    if out_extent < 1 or out_extent > in_extent:
        return None
    stride = max(1, round(in_extent / out_extent))
    if (in_extent - 1) // stride + 1 == out_extent:
        return stride
    return None


class Lru(Module):
    """Local refinement: depthwise 3x3 (grid change) then pointwise 1x1
    (channel change), each followed by BatchNorm and PReLU; plus GeM."""

    def __init__(self, in_dim, out_dim, in_grid, out_grid, rng, dtype=np.float64):
        super().__init__()
        sh = _pick_stride(in_grid[0], out_grid[0])
        sw = _pick_stride(in_grid[1], out_grid[1])
        if sh is None or sw is None or sh != sw:
            raise ConfigError(
                f"lru: no uniform depthwise stride maps grid {in_grid} to {out_grid}"
            )
        self.stride = sh
        self.depthwise = DepthwiseConv2d(in_dim, 3, rng, stride=sh, padding=1, dtype=dtype)
        self.bn1 = BatchNorm(in_dim, dtype=dtype)
        self.act1 = PReLU(in_dim, channel_axis=1, dtype=dtype)
        self.pointwise = Conv2d(in_dim, out_dim, 1, rng, dtype=dtype)
        self.bn2 = BatchNorm(out_dim, dtype=dtype)
        self.act2 = PReLU(out_dim, channel_axis=1, dtype=dtype)
        self.gem = GeMPool(dtype=dtype)

    def forward(self, x):
        h = self.act1.forward(self.bn1.forward(self.depthwise.forward(x)))
        h = self.act2.forward(self.bn2.forward(self.pointwise.forward(h)))
        return h, self.gem.forward(h)


class Seu(Module):
    """Pre-norm self-attention + FFN encoder over [global token; locals]."""

    def __init__(self, dim, heads, ffn_ratio, rng, dtype=np.float64):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, int(dim * ffn_ratio), rng, dtype=dtype)

    def forward(self, global_vec, local_tokens):
        """global_vec [B,D], local_tokens [B,HW,D] -> (S_g [B,D], S_l [B,HW,D])."""
        b, d = global_vec.data.shape
        seq = T.concat([T.reshape(global_vec, (b, 1, d)), local_tokens], axis=1)
        seq = T.add(seq, self.attn.forward(self.ln1.forward(seq)))
        seq = T.add(seq, self.ffn.forward(self.ln2.forward(seq)))
        head, rest = T.split(seq, 1, axis=1)
        return T.reshape(head, (b, d)), rest


class Mfu(Module):
    """Cross-attention fusion: one branch's global token queries the other
    branch's local tokens, heads concatenated, then a residual FFN.

    Follows the stated form with no output projection after the head concat
    and no LayerNorm before the cross-attention.
    """

    def __init__(self, dim, heads, ffn_ratio, rng, dtype=np.float64):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"mfu: dim {dim} not divisible by heads {heads}")
        self.num_heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.ffn = FeedForward(dim, int(dim * ffn_ratio), rng, dtype=dtype)
        self.capture = None

    def cross_attend(self, query_vec, kv_tokens):
        """query_vec [B,D], kv_tokens [B,HW,D] -> fused [B,D]."""
        b, hw, d = kv_tokens.data.shape
        if hw == 0:
            raise DataError("cross-attention needs at least one key/value token")
        nh, hd = self.num_heads, self.head_dim
        q = T.reshape(self.wq.forward(query_vec), (b, 1, nh, hd))
        q = T.permute(q, (0, 2, 1, 3))  # [B,h,1,d]
        k = T.permute(T.reshape(self.wk.forward(kv_tokens), (b, hw, nh, hd)), (0, 2, 1, 3))
        v = T.permute(T.reshape(self.wv.forward(kv_tokens), (b, hw, nh, hd)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.softmax(scores, axis=-1)  # [B,h,1,HW]
        if self.capture is not None:
            self.capture.append(attn.data.copy())
        fused = T.matmul(attn, v)  # [B,h,1,d]
        return T.reshape(T.permute(fused, (0, 2, 1, 3)), (b, d))

    def forward(self, own_global, other_locals):
        fused = self.cross_attend(own_global, other_locals)
        return T.add(self.ffn.forward(fused), fused)


class HtmLayer(Module):
    """One transmission layer; owned units depend on variant and sharing."""

    def __init__(self, cfg, rng, dtype=np.float64):
        super().__init__()
        self.variant = cfg.variant
        d, h, r = cfg.fused_dim, cfg.heads, cfg.ffn_hidden_ratio
        if cfg.variant != "mfu_only":
            if cfg.seu_shared:
                self.seu = Seu(d, h, r, rng, dtype=dtype)
            else:
                self.seu_cnn = Seu(d, h, r, rng, dtype=dtype)
                self.seu_vit = Seu(d, h, r, rng, dtype=dtype)
        if cfg.variant != "seu_only":
            if cfg.mfu_shared:
                self.mfu = Mfu(d, h, r, rng, dtype=dtype)
            else:
                self.mfu_cnn = Mfu(d, h, r, rng, dtype=dtype)
                self.mfu_vit = Mfu(d, h, r, rng, dtype=dtype)
        self.seu_shared = cfg.seu_shared and cfg.variant != "mfu_only"
        self.mfu_shared = cfg.mfu_shared and cfg.variant != "seu_only"

    def seu_for(self, branch):
        if self.seu_shared:
            return self.seu
        return self.seu_cnn if branch == "cnn" else self.seu_vit

    def mfu_for(self, branch):
        if self.mfu_shared:
            return self.mfu
        return self.mfu_cnn if branch == "cnn" else self.mfu_vit


class Dmf(Module):
    """Alignment LRUs plus the stacked transmission layers."""

    def __init__(self, cfg, cnn_dim, cnn_grid, vit_dim, vit_grid, rng, dtype=np.float64):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vit_grid = vit_grid
        if cfg.fused_grid is not None:
            fused_grid = tuple(cfg.fused_grid)
        elif cnn_grid == vit_grid:
            fused_grid = cnn_grid
        else:
            raise ConfigError(
                f"dmf: fused_grid not set and branch grids differ (cnn {cnn_grid}, vit {vit_grid})"
            )
        self.fused_grid = fused_grid
        self.lru_cnn = Lru(cnn_dim, cfg.fused_dim, cnn_grid, fused_grid, rng, dtype=dtype)
        self.lru_vit = Lru(vit_dim, cfg.fused_dim, vit_grid, fused_grid, rng, dtype=dtype)
        self.layers = ModuleList(HtmLayer(cfg, rng, dtype=dtype) for _ in range(cfg.layers))
        self.attention_log = None  # list of capture records when enabled

    # -- attention capture ------------------------------------------------

    def start_capture(self):
        self.attention_log = []

    def stop_capture(self):
        log, self.attention_log = self.attention_log, None
        return log

    def _record(self, layer_idx, branch, unit, weights):
        if self.attention_log is not None:
            self.attention_log.append(
                {"layer": layer_idx, "branch": branch, "unit": unit, "weights": weights}
            )

    def _run_seu(self, layer, layer_idx, branch, global_vec, locals_):
        seu = layer.seu_for(branch)
        bucket = [] if self.attention_log is not None else None
        seu.attn.capture = bucket
        out = seu.forward(global_vec, locals_)
        seu.attn.capture = None
        if bucket:
            self._record(layer_idx, branch, "seu", bucket[0])
        return out

    def _run_mfu(self, layer, layer_idx, branch, own_global, other_locals):
        mfu = layer.mfu_for(branch)
        bucket = [] if self.attention_log is not None else None
        mfu.capture = bucket
        out = mfu.forward(own_global, other_locals)
        mfu.capture = None
        if bucket:
            self._record(layer_idx, branch, "mfu", bucket[0])
        return out

    # -- forward -------------------------------------------------------------

    def refine(self, map_cnn, map_vit):
        """Run both LRUs; the transformer map [B,D_t,N] is gridded first."""
        b, dt, n = map_vit.data.shape
        gh, gw = self.vit_grid
        if gh * gw != n:
            raise ConfigError(f"dmf: token count {n} does not fill grid {self.vit_grid}")
        vit_gridded = T.reshape(map_vit, (b, dt, gh, gw))
        fc, vc = self.lru_cnn.forward(map_cnn)
        ft, vt = self.lru_vit.forward(vit_gridded)
        return RefinedPair(fc, ft, vc, vt)

    @staticmethod
    def _flatten_locals(feature_map):
        b, d, h, w = feature_map.data.shape
        return T.permute(T.reshape(feature_map, (b, d, h * w)), (0, 2, 1))  # [B,HW,D]

    def htm_step(self, state, refined, layer_idx):
        """Advance both global tokens one layer, recycling the refined locals."""
        layer = self.layers[layer_idx]
        locals_cnn = self._flatten_locals(refined.map_cnn)
        locals_vit = self._flatten_locals(refined.map_vit)
        fc, ft = state.vec_cnn, state.vec_vit
        variant = layer.variant

        if variant == "seu_only":
            sg_c, _ = self._run_seu(layer, layer_idx, "cnn", fc, locals_cnn)
            sg_t, _ = self._run_seu(layer, layer_idx, "vit", ft, locals_vit)
            next_c, next_t = sg_c, sg_t
        elif variant == "mfu_only":
            next_c = self._run_mfu(layer, layer_idx, "cnn", fc, locals_vit)
            next_t = self._run_mfu(layer, layer_idx, "vit", ft, locals_cnn)
        elif variant == "seu_then_mfu":
            sg_c, sl_c = self._run_seu(layer, layer_idx, "cnn", fc, locals_cnn)
            sg_t, sl_t = self._run_seu(layer, layer_idx, "vit", ft, locals_vit)
            next_c = self._run_mfu(layer, layer_idx, "cnn", sg_c, sl_t)
            next_t = self._run_mfu(layer, layer_idx, "vit", sg_t, sl_c)
        elif variant == "mfu_then_seu":
            m_c = self._run_mfu(layer, layer_idx, "cnn", fc, locals_vit)
            m_t = self._run_mfu(layer, layer_idx, "vit", ft, locals_cnn)
            sg_c, _ = self._run_seu(layer, layer_idx, "cnn", m_c, locals_cnn)
            sg_t, _ = self._run_seu(layer, layer_idx, "vit", m_t, locals_vit)
            next_c, next_t = sg_c, sg_t
        else:
            raise ConfigError(f"unknown variant {variant!r}")
        return HtmState(state.layer + 1, next_c, next_t)

    def forward(self, map_cnn, map_vit):
        refined = self.refine(map_cnn, map_vit)
        state = HtmState(0, refined.vec_cnn, refined.vec_vit)
        for k in range(len(self.layers)):
            state = self.htm_step(state, refined, k)
        return refined, state.vec_cnn, state.vec_vit


# -- parameter accounting -----------------------------------------------------


def _count(module):
    return ParamStore.from_module(module).total_count()


def count_params(cfg, cnn_dim=16, cnn_grid=(16, 8), vit_dim=64, vit_grid=(16, 8)):
    """Exact per-component parameter counts for a fusion-stack config."""
    cfg.validate()
    rng = np.random.default_rng(0)
    dmf = Dmf(cfg, cnn_dim, cnn_grid, vit_dim, vit_grid, rng)
    d, h, r = cfg.fused_dim, cfg.heads, cfg.ffn_hidden_ratio
    counts = {
        "lru_cnn": _count(dmf.lru_cnn),
        "lru_vit": _count(dmf.lru_vit),
        "seu_unit": _count(Seu(d, h, r, rng)),
        "mfu_unit": _count(Mfu(d, h, r, rng)),
        "per_layer": _count(dmf.layers[0]),
        "htm_stack": sum(_count(layer) for layer in dmf.layers),
    }
    counts["dmf_total"] = counts["lru_cnn"] + counts["lru_vit"] + counts["htm_stack"]
    return counts
