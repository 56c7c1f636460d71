"""Configuration dataclasses, file loading (TOML/JSON) and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class CnnConfig:
    """Scaled-down residual CNN. Every stage downsamples by 2 at its first
    block except the final stage, which uses ``last_stride``."""

    stage_channels: list = field(default_factory=lambda: [8, 16])
    blocks_per_stage: list = field(default_factory=lambda: [1, 1])
    stem_stride: int = 2
    last_stride: int = 1

    def validate(self, prefix="model.cnn"):
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError(f"{prefix}: stage_channels and blocks_per_stage lengths differ")
        if not self.stage_channels:
            raise ConfigError(f"{prefix}.stage_channels: need at least one stage")
        if self.last_stride not in (1, 2):
            raise ConfigError(f"{prefix}.last_stride: must be 1 or 2, got {self.last_stride}")
        if self.stem_stride < 1:
            raise ConfigError(f"{prefix}.stem_stride: must be >= 1")

    @property
    def out_channels(self):
        return self.stage_channels[-1]

    def stage_strides(self):
        n = len(self.stage_channels)
        return [2] * (n - 1) + [self.last_stride]

    def total_stride(self):
        total = self.stem_stride
        for s in self.stage_strides():
            total *= s
        return total

    def output_grid(self, image_size):
        h, w = image_size
        total = self.total_stride()
        if h % total or w % total:
            raise ConfigError(
                f"model.cnn: input {h}x{w} not divisible by total stride {total}"
            )
        return (h // total, w // total)


@dataclass
class VitConfig:
    """Scaled-down ViT; ``patch_stride < patch_size`` gives overlapping patches."""

    patch_size: int = 4
    patch_stride: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    num_cameras: int = 2
    camera_scale: float = 1.0

    def validate(self, prefix="model.vit"):
        if self.patch_stride > self.patch_size:
            raise ConfigError(f"{prefix}.patch_stride: must be <= patch_size")
        if self.patch_stride < 1:
            raise ConfigError(f"{prefix}.patch_stride: must be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError(f"{prefix}: embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ConfigError(f"{prefix}.depth: must be >= 0")
        if self.num_cameras < 1:
            raise ConfigError(f"{prefix}.num_cameras: must be >= 1")
        if self.camera_scale < 0:
            raise ConfigError(f"{prefix}.camera_scale: must be >= 0")

    def patch_grid(self, image_size):
        h, w = image_size
        if h < self.patch_size or w < self.patch_size:
            raise ConfigError(f"model.vit: image {h}x{w} smaller than patch {self.patch_size}")
        gh = (h - self.patch_size) // self.patch_stride + 1
        gw = (w - self.patch_size) // self.patch_stride + 1
        if self.patch_stride == self.patch_size and (h % self.patch_size or w % self.patch_size):
            raise ConfigError(
                f"model.vit: patch grid does not tile {h}x{w} with patch {self.patch_size}"
            )
        return (gh, gw)


VARIANTS = ("seu_then_mfu", "seu_only", "mfu_then_seu", "mfu_only")


@dataclass
class DmfConfig:
    fused_dim: int = 64
    fused_grid: list | None = None  # None: both branch grids must match and are reused
    heads: int = 4
    layers: int = 2
    seu_shared: bool = True
    mfu_shared: bool = False
    variant: str = "seu_then_mfu"
    ffn_hidden_ratio: float = 4.0

    def validate(self, prefix="model.dmf"):
        if self.fused_dim % self.heads:
            raise ConfigError(f"{prefix}: fused_dim {self.fused_dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError(f"{prefix}.layers: must be >= 1, got {self.layers}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"{prefix}.variant: {self.variant!r} not in {VARIANTS}")
        if self.ffn_hidden_ratio <= 0:
            raise ConfigError(f"{prefix}.ffn_hidden_ratio: must be > 0")


MODES = ("fusion", "cnn_only", "vit_only")


@dataclass
class ModelConfig:
    image_size: list = field(default_factory=lambda: [64, 32])
    num_classes: int = 8
    mode: str = "fusion"
    bnneck: bool = True
    dtype: str = "float64"
    cnn: CnnConfig = field(default_factory=CnnConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    dmf: DmfConfig = field(default_factory=DmfConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"model.mode: {self.mode!r} not in {MODES}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"model.dtype: {self.dtype!r} not float64/float32")
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes: need >= 2, got {self.num_classes}")
        self.cnn.validate()
        self.vit.validate()
        self.dmf.validate()
        if self.mode == "fusion":
            self.resolve_fused_grid()

    def resolve_fused_grid(self):
        """The common (H, W) grid both LRUs map onto."""
        if self.dmf.fused_grid is not None:
            return tuple(self.dmf.fused_grid)
        cnn_grid = self.cnn.output_grid(self.image_size)
        vit_grid = self.vit.patch_grid(self.image_size)
        if cnn_grid != vit_grid:
            raise ConfigError(
                f"model.dmf.fused_grid: not set and branch grids differ "
                f"(cnn {cnn_grid} vs vit {vit_grid})"
            )
        return cnn_grid


@dataclass
class OptimConfig:
    base_lr: float = 5e-4
    peak_lr: float = 5e-3
    warmup_epochs: int = 10
    total_epochs: int = 180
    momentum: float = 0.9
    weight_decay: float = 1e-4
    min_lr: float = 0.0
    clip_grad_norm: float = 0.0  # 0 disables clipping

    def validate(self):
        if not 0 < self.base_lr <= self.peak_lr:
            raise ConfigError("optim: need 0 < base_lr <= peak_lr")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("optim: need 0 <= warmup_epochs < total_epochs")
        if not 0 <= self.momentum < 1:
            raise ConfigError("optim.momentum: must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("optim.weight_decay: must be >= 0")


@dataclass
class AugmentPolicy:
    flip_prob: float = 0.5
    crop_pad: int = 10
    crop_prob: float = 1.0
    erase_prob: float = 0.5
    erase_area: list = field(default_factory=lambda: [0.02, 0.4])
    erase_aspect: list = field(default_factory=lambda: [0.3, 3.33])

    @classmethod
    def disabled(cls):
        return cls(flip_prob=0.0, crop_pad=0, crop_prob=0.0, erase_prob=0.0)


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | manifest
    manifest: str = ""
    num_pids: int = 8
    cams: int = 2
    views_per_cam: int = 4
    gallery_views: int = 2
    image_size: list = field(default_factory=lambda: [64, 32])
    p_pids: int = 4
    k_instances: int = 4
    augment: bool = True

    def validate(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source: {self.source!r} not synthetic/manifest")
        if self.source == "manifest" and not self.manifest:
            raise ConfigError("data.manifest: path required when data.source='manifest'")
        if self.source == "synthetic":
            if self.num_pids < 2:
                raise ConfigError("data.num_pids: need >= 2")
            if self.cams < 2:
                raise ConfigError("data.cams: need >= 2")
        if self.p_pids < 2 or self.k_instances < 2:
            raise ConfigError("data: PK sampling needs p_pids >= 2 and k_instances >= 2")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    train_steps: int = 200
    log_every: int = 10
    checkpoint_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        if self.train_steps < 1:
            raise ConfigError("train_steps: must be >= 1")
        self.model.validate()
        self.optim.validate()
        self.data.validate()
        if self.model.vit.num_cameras < self.data.cams and self.data.source == "synthetic":
            raise ConfigError(
                f"model.vit.num_cameras ({self.model.vit.num_cameras}) < data.cams ({self.data.cams})"
            )


# -- dict/file plumbing -------------------------------------------------------


def _coerce(value, template, path):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{path}: expected bool, got {value!r}")
    if isinstance(template, int) and not isinstance(template, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected int, got {value!r}") from None
    if isinstance(template, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected float, got {value!r}") from None
    if isinstance(template, str):
        return str(value)
    if isinstance(template, list) or template is None:
        if isinstance(value, str):
            value = [v for v in value.replace("[", "").replace("]", "").split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return [int(v) if str(v).lstrip("-").isdigit() else float(v) for v in value]
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _update_dataclass(obj, data, path=""):
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        full = f"{path}{key}"
        if key not in names:
            raise ConfigError(f"unknown config field: {full}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{full}: expected a section/table")
            _update_dataclass(current, value, path=f"{full}.")
        else:
            setattr(obj, key, _coerce(value, current, full))
    return obj


def config_from_dict(data):
    return _update_dataclass(RunConfig(), data)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path):
    """Load a RunConfig from a TOML or JSON file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
    else:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    return config_from_dict(data)


def apply_overrides(cfg, overrides):
    """Apply ``key.path=value`` strings on top of a RunConfig."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, value = item.split("=", 1)
        node = cfg
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(node) or not hasattr(node, part):
                raise ConfigError(f"unknown config field: {dotted}")
            node = getattr(node, part)
        leaf_name = parts[-1]
        if not dataclasses.is_dataclass(node) or not hasattr(node, leaf_name):
            raise ConfigError(f"unknown config field: {dotted}")
        current = getattr(node, leaf_name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{dotted}: cannot assign to a section")
        setattr(node, leaf_name, _coerce(value, current, dotted))
    return cfg


def write_resolved_config(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    return path
