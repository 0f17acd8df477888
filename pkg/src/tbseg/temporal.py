"""Temporal feature aggregation over fixed frame offsets.

The temporal variant looks back at the frames ``t - 3``, ``t - 6`` and
``t - 9`` (offsets are configurable), averages their fused feature maps, and
concatenates that average with the current frame's fused map before
classification. Early frames clamp out-of-range references to frame 0, so a
clip of any length can be processed from its first frame.

Video-mode inference walks a clip in order with an LRU feature cache so each
frame's trunk runs exactly once even though it is referenced by up to
``len(offsets) + 1`` different timesteps.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import torch

from .bilateral import SegHead
from .errors import ConfigurationError, ContractViolationError, DataError
from .featuremap import FeatureMap
from .network import BilateralSegNet, ModelConfig


def reference_indices(t: int, offsets: Sequence[int] = (3, 6, 9),
                      num_frames: int | None = None) -> list[int]:
    """Frame indices referenced from time ``t``: ``max(t - k, 0)`` per offset.

    Duplicates are kept — near the clip start several offsets clamp to
    frame 0 and the average then weights frame 0 accordingly. Passing
    ``num_frames`` additionally bounds ``t`` to the clip.
    """
    if num_frames is not None and num_frames < 1:
        raise ConfigurationError(f"num_frames must be positive, got {num_frames}")
    if t < 0 or (num_frames is not None and t >= num_frames):
        bound = "" if num_frames is None else f" of a {num_frames}-frame clip"
        raise ConfigurationError(f"invalid frame index {t}{bound}")
    if not offsets:
        raise ConfigurationError("offsets must be non-empty")
    prev = 0
    for off in offsets:
        if off <= prev:
            raise ConfigurationError(
                f"offsets must be strictly increasing positives, got {tuple(offsets)}"
            )
        prev = off
    return [max(t - off, 0) for off in offsets]


def temporal_average(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Elementwise mean of equally shaped feature maps, order-independent.

    The stack is sorted elementwise before summation so the result is
    bitwise identical under any permutation of ``features`` (float addition
    is not associative, so a naive running sum would not be).
    """
    if not features:
        raise ConfigurationError("need at least one feature map to average")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ContractViolationError(
                f"temporal average needs matching shapes, got {tuple(shape)} vs {tuple(f.shape)}"
            )
    stacked = torch.stack(tuple(features), dim=0)
    ordered, _ = torch.sort(stacked, dim=0)
    total = ordered[0]
    for i in range(1, ordered.shape[0]):
        total = total + ordered[i]
    return total / len(features)


class FeatureCache:
    """LRU cache of fused feature maps keyed by (clip_id, frame_idx)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"cache capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._store: OrderedDict[tuple, FeatureMap] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: tuple) -> bool:
        return key in self._store

    def get(self, key: tuple) -> FeatureMap | None:
        if key in self._store:
            self._store.move_to_end(key)
            self.hits += 1
            return self._store[key]
        self.misses += 1
        return None

    def put(self, key: tuple, value: FeatureMap) -> None:
        if key in self._store:
            self._store.move_to_end(key)
        self._store[key] = value
        while len(self._store) > self.capacity:
            self._store.popitem(last=False)

    def clear(self) -> None:
        self._store.clear()
        self.hits = 0
        self.misses = 0


def default_cache_capacity(offsets: Sequence[int]) -> int:
    """Smallest safe LRU capacity for an in-order clip walk.

    Let g be the largest gap between consecutive reference offsets (including
    the gap from offset 0 to the first one) and k = len(offsets). While the
    walk advances from one use of a cached frame to its next use, at most
    g - 1 timesteps pass, each inserting or refreshing at most k + 1 entries
    ahead of it in the LRU order. Sizing the cache to (g + 1) * (k + 1)
    therefore keeps every still-needed frame resident; for offsets (3, 6, 9)
    this is 16 entries.
    """
    prev = 0
    gap = 0
    for off in offsets:
        gap = max(gap, off - prev)
        prev = off
    return (gap + 1) * (len(offsets) + 1)


class TemporalBilateralNet(BilateralSegNet):
    """Two-path network with reference-frame feature averaging.

    Adds ``temporal_head``, a segmentation head over the concatenation of the
    current fused map and the averaged reference maps (twice the fusion
    width). The single-frame ``head`` remains usable and is supervised as an
    auxiliary output during training.
    """

    def __init__(self, config: ModelConfig):
        if not config.temporal:
            raise ConfigurationError("TemporalBilateralNet requires temporal=True config")
        super().__init__(config)
        self.temporal_head = SegHead(2 * self.ffm.out_channels,
                                     config.head_mid_channels, config.num_classes)

    def forward_temporal(self, current: FeatureMap, references: Sequence[FeatureMap],
                         out_hw: tuple[int, int] | None = None) -> torch.Tensor:
        """Classify one frame given its fused map and its references' maps."""
        if not references:
            raise ConfigurationError("forward_temporal needs at least one reference map")
        avg = temporal_average([r.tensor for r in references])
        if avg.shape != current.tensor.shape:
            raise ContractViolationError(
                f"reference maps {tuple(avg.shape)} do not match current {tuple(current.tensor.shape)}"
            )
        merged = FeatureMap(torch.cat([current.tensor, avg], dim=1),
                            stride=current.stride, orig_hw=current.orig_hw)
        return self.temporal_head(merged, out_hw)

    def forward_video(self, frames: Sequence[torch.Tensor], clip_id: str = "clip",
                      cache: FeatureCache | None = None) -> torch.Tensor:
        """Segment every frame of a clip in order; returns [T, K, H, W].

        Runs in eval mode under no_grad (the previous training flag is
        restored afterwards). Each frame's trunk is evaluated exactly once;
        reference lookups hit the cache.
        """
        if len(frames) == 0:
            raise DataError("cannot run video inference on an empty clip")
        if cache is None:
            cache = FeatureCache(default_cache_capacity(self.config.temporal_offsets))

        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                outputs = []
                num_frames = len(frames)
                for t in range(num_frames):
                    current = self._cached_extract(frames, t, clip_id, cache)
                    refs = [
                        self._cached_extract(frames, r, clip_id, cache)
                        for r in reference_indices(t, self.config.temporal_offsets, num_frames)
                    ]
                    outputs.append(self.forward_temporal(current, refs))
                return torch.cat(outputs, dim=0)
        finally:
            self.train(was_training)

    def _cached_extract(self, frames: Sequence[torch.Tensor], idx: int, clip_id: str,
                        cache: FeatureCache) -> FeatureMap:
        key = (clip_id, idx)
        found = cache.get(key)
        if found is not None:
            return found
        feat = self.extract(self._as_tensor(frames[idx]))
        cache.put(key, feat)
        return feat

    def _as_tensor(self, frame) -> torch.Tensor:
        frame = torch.as_tensor(frame, dtype=torch.float32)
        if frame.ndim == 3:
            frame = frame.unsqueeze(0)
        if frame.ndim != 4 or frame.shape[0] != 1:
            raise DataError(
                f"video frames must be [C,H,W] or [1,C,H,W], got {tuple(frame.shape)}"
            )
        return frame
