"""Two-path segmentation components: spatial path, context refinement, fusion.

The spatial path keeps detail with three stride-2 convolutions (stride 8
total). The context path comes from the transformer encoder taps; its two
levels are refined by channel-attention modules, combined with a global
pooling prior, and upsampled back to stride 8 where a feature-fusion module
merges both paths. All upsampling targets the exact ceil-divided grid of the
original input size, so odd sizes line up without off-by-one drift.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolationError
from .featuremap import FeatureMap


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None):
        if padding is None:
            padding = kernel // 2
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class SpatialPath(nn.Module):
    """Three stride-2 conv blocks producing a stride-8 detail map."""

    def __init__(self, in_channels: int = 3, channels: tuple = (64, 64, 128)):
        super().__init__()
        if len(channels) != 3:
            raise ConfigurationError(f"spatial path needs 3 channel counts, got {channels}")
        self.layer1 = ConvBNReLU(in_channels, channels[0], kernel=3, stride=2)
        self.layer2 = ConvBNReLU(channels[0], channels[1], kernel=3, stride=2)
        self.layer3 = ConvBNReLU(channels[1], channels[2], kernel=3, stride=2)
        self.out_channels = channels[2]

    def forward(self, x: torch.Tensor) -> FeatureMap:
        orig_hw = (int(x.shape[2]), int(x.shape[3]))
        x = self.layer3(self.layer2(self.layer1(x)))
        return FeatureMap(x, stride=8, orig_hw=orig_hw)


class AttentionRefinement(nn.Module):
    """Channel gate from global context: x * sigmoid(BN(conv1x1(GAP(x))))."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.bn(self.conv(F.adaptive_avg_pool2d(x, 1))))
        return x * gate


class ContextHead(nn.Module):
    """Refines the two encoder taps into a single stride-8 context map.

    The deeper tap gets an attention-refinement gate plus a broadcast global
    feature; the result is upsampled, merged with the refined shallower tap,
    refined with 3x3 convs, and projected to ``out_channels`` at stride 8.
    """

    def __init__(self, penult_channels: int, last_channels: int,
                 out_channels: int = 128, use_global_context: bool = True):
        super().__init__()
        self.use_global_context = use_global_context
        self.arm16 = AttentionRefinement(penult_channels)
        self.arm32 = AttentionRefinement(last_channels)
        if use_global_context:
            self.global_conv = ConvBNReLU(last_channels, last_channels, kernel=1)
        self.refine32 = ConvBNReLU(last_channels, penult_channels, kernel=3)
        self.refine16 = ConvBNReLU(penult_channels, out_channels, kernel=3)
        self.out_channels = out_channels

    def forward(self, f_penult: FeatureMap, f_last: FeatureMap) -> FeatureMap:
        if f_penult.orig_hw != f_last.orig_hw:
            raise ContractViolationError(
                f"tap orig_hw values disagree: {f_penult.orig_hw} vs {f_last.orig_hw}"
            )
        h, w = f_last.orig_hw

        deep = self.arm32(f_last.tensor)
        if self.use_global_context:
            pooled = F.adaptive_avg_pool2d(f_last.tensor, 1)
            deep = deep + self.global_conv(pooled)

        deep = F.interpolate(deep, size=f_penult.spatial, mode="bilinear",
                             align_corners=False)
        deep = self.refine32(deep)

        mid = deep + self.arm16(f_penult.tensor)
        target = (ceil_div(h, 8), ceil_div(w, 8))
        mid = F.interpolate(mid, size=target, mode="bilinear", align_corners=False)
        out = self.refine16(mid)
        return FeatureMap(out, stride=8, orig_hw=(h, w))


class FeatureFusion(nn.Module):
    """Concatenate the two paths, project, and re-weight with a channel gate.

    h = ReLU(BN(conv1x1(cat(sp, cx)))); a = sigmoid(MLP(GAP(h))); out = h + h*a.
    """

    def __init__(self, spatial_channels: int, context_channels: int, out_channels: int):
        super().__init__()
        if out_channels % 4 != 0:
            raise ConfigurationError(f"fusion channels must be divisible by 4, got {out_channels}")
        self.project = ConvBNReLU(spatial_channels + context_channels, out_channels, kernel=1)
        self.gate_down = nn.Conv2d(out_channels, out_channels // 4, kernel_size=1)
        self.gate_up = nn.Conv2d(out_channels // 4, out_channels, kernel_size=1)
        self.out_channels = out_channels

    def forward(self, sp: FeatureMap, cx: FeatureMap) -> FeatureMap:
        if sp.spatial != cx.spatial:
            raise ContractViolationError(
                f"fusion inputs must share a grid, got {sp.spatial} vs {cx.spatial}"
            )
        if sp.orig_hw != cx.orig_hw:
            raise ContractViolationError(
                f"fusion inputs must share orig_hw, got {sp.orig_hw} vs {cx.orig_hw}"
            )
        h = self.project(torch.cat([sp.tensor, cx.tensor], dim=1))
        a = torch.sigmoid(self.gate_up(F.relu(self.gate_down(F.adaptive_avg_pool2d(h, 1)))))
        return FeatureMap(h + h * a, stride=sp.stride, orig_hw=sp.orig_hw)


class SegHead(nn.Module):
    """3x3 conv block, 1x1 classifier, bilinear upsample to the label grid."""

    def __init__(self, in_channels: int, mid_channels: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        self.conv = ConvBNReLU(in_channels, mid_channels, kernel=3)
        self.classify = nn.Conv2d(mid_channels, num_classes, kernel_size=1)

    def forward(self, feat: FeatureMap, out_hw: tuple[int, int] | None = None) -> torch.Tensor:
        logits = self.classify(self.conv(feat.tensor))
        target = out_hw if out_hw is not None else feat.orig_hw
        return F.interpolate(logits, size=target, mode="bilinear", align_corners=False)
