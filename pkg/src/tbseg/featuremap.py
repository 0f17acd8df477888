"""Feature map container carrying stride metadata alongside the tensor."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractViolationError


@dataclass
class FeatureMap:
    """A [B, C, H, W] tensor plus its downsampling factor and source size.

    ``stride`` is the downsampling factor relative to the (unpadded) network
    input; ``orig_hw`` is that input's spatial size, kept so heads can
    upsample back to exact label resolution.
    """

    tensor: torch.Tensor
    stride: int
    orig_hw: tuple[int, int]

    def __post_init__(self):
        if self.tensor.ndim != 4:
            raise ContractViolationError(
                f"FeatureMap expects a 4-D [B,C,H,W] tensor, got shape {tuple(self.tensor.shape)}"
            )

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[2], self.tensor.shape[3]

    def same_shape(self, other: "FeatureMap") -> bool:
        return self.tensor.shape == other.tensor.shape and self.stride == other.stride

    def detach(self) -> "FeatureMap":
        return FeatureMap(self.tensor.detach(), self.stride, self.orig_hw)
