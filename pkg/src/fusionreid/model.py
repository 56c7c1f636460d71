"""Full model: dual backbones, fusion stack and the six supervised heads.

During training each of the six features (two backbone globals, two refined
globals, two fused globals) feeds its own classifier; at test time the six
features are concatenated, in the fixed order below, into one embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbones import ToyCnn, ToyVit
from .dmf import Dmf
from .errors import ConfigError
from .nn import BatchNorm, Linear, Module, ParamStore
from .tensor import Tensor

FEATURE_ORDER = ("cnn", "vit", "cnn_refined", "vit_refined", "cnn_fused", "vit_fused")


@dataclass
class FeatureSet:
    """Supervised features (+ logits when requested), keyed by head name."""

    features: dict
    logits: dict | None = None

    def ordered(self):
        return [self.features[name] for name in FEATURE_ORDER if name in self.features]


class ClassifierHead(Module):
    """Optional BN-neck then a linear classifier (no bias under the neck)."""

    def __init__(self, dim, num_classes, rng, bnneck=True, dtype=np.float64):
        super().__init__()
        self.neck = BatchNorm(dim, dtype=dtype) if bnneck else None
        self.fc = Linear(dim, num_classes, rng, bias=not bnneck, std=0.01, dtype=dtype)

    def forward(self, feat):
        h = self.neck.forward(feat) if self.neck is not None else feat
        return self.fc.forward(h)


class FusionReid(Module):
    """The trainable model for one ModelConfig; construction is seeded."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.float64 if cfg.dtype == "float64" else np.float32
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xF05)))
        image_size = tuple(cfg.image_size)
        self.register_buffer("input_mean", np.zeros(3, dtype=self.dtype))
        self.register_buffer("input_std", np.ones(3, dtype=self.dtype))

        self.cnn = ToyCnn(cfg.cnn, image_size, rng, dtype=self.dtype) if cfg.mode != "vit_only" else None
        self.vit = ToyVit(cfg.vit, image_size, rng, dtype=self.dtype) if cfg.mode != "cnn_only" else None
        if cfg.mode == "fusion":
            self.dmf = Dmf(
                cfg.dmf,
                self.cnn.out_channels,
                self.cnn.out_grid,
                cfg.vit.embed_dim,
                self.vit.grid,
                rng,
                dtype=self.dtype,
            )
        else:
            self.dmf = None

        dims = self.feature_dims()
        for name, dim in dims.items():
            self.add_module(
                f"head_{name}", ClassifierHead(dim, cfg.num_classes, rng, bnneck=cfg.bnneck, dtype=self.dtype)
            )

    def feature_dims(self):
        cfg = self.cfg
        if cfg.mode == "cnn_only":
            return {"cnn": cfg.cnn.stage_channels[-1]}
        if cfg.mode == "vit_only":
            return {"vit": cfg.vit.embed_dim}
        d = cfg.dmf.fused_dim
        return {
            "cnn": cfg.cnn.stage_channels[-1],
            "vit": cfg.vit.embed_dim,
            "cnn_refined": d,
            "vit_refined": d,
            "cnn_fused": d,
            "vit_fused": d,
        }

    def embedding_dim(self):
        return sum(self.feature_dims().values())

    def set_input_stats(self, mean, std):
        self.input_mean[:] = np.asarray(mean, dtype=self.dtype)
        self.input_std[:] = np.maximum(np.asarray(std, dtype=self.dtype), 1e-6)

    def param_store(self):
        return ParamStore.from_module(self)

    def _normalize(self, images):
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        return (images - self.input_mean.reshape(1, 3, 1, 1)) / self.input_std.reshape(1, 3, 1, 1)

    def forward(self, images, cam_ids=None, with_logits=False):
        """images [B,3,H,W] (raw [0,1] floats), cam_ids [B] -> FeatureSet."""
        x = Tensor(self._normalize(images))
        feats = {}
        if self.cfg.mode == "cnn_only":
            feats["cnn"] = self.cnn.forward(x).global_vec
        elif self.cfg.mode == "vit_only":
            feats["vit"] = self.vit.forward(x, cam_ids).global_vec
        else:
            out_c = self.cnn.forward(x)
            out_t = self.vit.forward(x, cam_ids)
            refined, fused_c, fused_t = self.dmf.forward(out_c.feature_map, out_t.feature_map)
            feats["cnn"] = out_c.global_vec
            feats["vit"] = out_t.global_vec
            feats["cnn_refined"] = refined.vec_cnn
            feats["vit_refined"] = refined.vec_vit
            feats["cnn_fused"] = fused_c
            feats["vit_fused"] = fused_t

        logits = None
        if with_logits:
            logits = {
                name: getattr(self, f"head_{name}").forward(feat) for name, feat in feats.items()
            }
        return FeatureSet(feats, logits)

    def embed(self, images, cam_ids=None):
        """Concatenated, L2-normalized retrieval embedding [B, sum(dims)]."""
        fs = self.forward(images, cam_ids=cam_ids, with_logits=False)
        joined = T.concat(fs.ordered(), axis=1)
        norms = np.sqrt((joined.data * joined.data).sum(axis=1, keepdims=True))
        return joined.data / np.maximum(norms, 1e-12)


def build_model(cfg, seed=0):
    model = FusionReid(cfg, seed=seed)
    if cfg.mode == "fusion" and model.dmf is None:
        raise ConfigError("fusion mode requires both branches")
    return model
