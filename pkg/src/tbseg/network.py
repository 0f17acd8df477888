"""Model configuration and the single-frame segmentation network.

``ModelConfig`` is the serializable source of truth for architecture
hyperparameters; its digest is embedded in checkpoints so weights are never
restored into a differently shaped model. ``BilateralSegNet`` wires the
transformer context encoder, the convolutional spatial path, fusion, and the
segmentation head. The temporal variant subclasses it in
:mod:`tbseg.temporal`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import torch.nn as nn

from .backbone import BackboneConfig, WindowTransformerBackbone
from .bilateral import ContextHead, FeatureFusion, SegHead, SpatialPath
from .errors import ConfigurationError
from .featuremap import FeatureMap

BOUNDARY_POLICIES = ("clamp_to_first",)


@dataclass
class ModelConfig:
    """Architecture hyperparameters for both network variants."""

    num_classes: int = 4
    in_channels: int = 3
    patch_size: int = 4
    embed_dim: int = 24
    depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (1, 2, 4, 8)
    window_size: int = 4
    mlp_ratio: float = 4.0
    spatial_channels: tuple = (64, 64, 128)
    context_channels: int = 128
    fusion_channels: int = 128
    head_mid_channels: int = 64
    use_global_context: bool = True
    temporal: bool = False
    temporal_offsets: tuple = (3, 6, 9)
    boundary_policy: str = "clamp_to_first"
    stop_gradient_references: bool = True

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        self.backbone_config().validate()
        if len(self.spatial_channels) != 3:
            raise ConfigurationError(
                f"spatial_channels needs 3 entries, got {self.spatial_channels}"
            )
        if self.fusion_channels % 4 != 0:
            raise ConfigurationError(
                f"fusion_channels must be divisible by 4, got {self.fusion_channels}"
            )
        if self.boundary_policy not in BOUNDARY_POLICIES:
            raise ConfigurationError(
                f"unknown boundary_policy {self.boundary_policy!r}, expected one of {BOUNDARY_POLICIES}"
            )
        if not self.temporal_offsets:
            raise ConfigurationError("temporal_offsets must be non-empty")
        prev = 0
        for off in self.temporal_offsets:
            if off <= prev:
                raise ConfigurationError(
                    f"temporal_offsets must be strictly increasing positives, got {self.temporal_offsets}"
                )
            prev = off

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            patch_size=self.patch_size,
            in_channels=self.in_channels,
            embed_dim=self.embed_dim,
            depths=tuple(self.depths),
            num_heads=tuple(self.num_heads),
            window_size=self.window_size,
            mlp_ratio=self.mlp_ratio,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("depths", "num_heads", "spatial_channels", "temporal_offsets"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("depths", "num_heads", "spatial_channels", "temporal_offsets"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class BilateralSegNet(nn.Module):
    """Single-frame two-path segmentation network.

    Child modules are named ``backbone``, ``spatial``, ``context``, ``ffm``
    and ``head``; parameter names under these prefixes are stable and are the
    contract used by checkpoints and optimizer grouping.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        cfg = self.config

        self.backbone = WindowTransformerBackbone(cfg.backbone_config())
        penult_ch, last_ch = self.backbone.out_channels
        self.context = ContextHead(penult_ch, last_ch, cfg.context_channels,
                                   use_global_context=cfg.use_global_context)
        self.spatial = SpatialPath(cfg.in_channels, tuple(cfg.spatial_channels))
        self.ffm = FeatureFusion(self.spatial.out_channels, cfg.context_channels,
                                 cfg.fusion_channels)
        self.head = SegHead(cfg.fusion_channels, cfg.head_mid_channels, cfg.num_classes)

    def extract(self, x) -> FeatureMap:
        """Fused stride-8 feature map for one batch of frames."""
        taps = self.backbone(x)
        cx = self.context(taps.f_penult, taps.f_last)
        sp = self.spatial(x)
        return self.ffm(sp, cx)

    def forward(self, x, out_hw: tuple[int, int] | None = None):
        return self.head(self.extract(x), out_hw)


def build_model(config: ModelConfig) -> BilateralSegNet:
    """Construct the configured variant (single-frame or temporal)."""
    if config.temporal:
        from .temporal import TemporalBilateralNet

        return TemporalBilateralNet(config)
    return BilateralSegNet(config)
