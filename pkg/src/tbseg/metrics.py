"""Segmentation quality metrics built on an integer confusion matrix.

IoU is computed from exact int64 pixel counts, so results are independent of
update order and batch partitioning: accumulating per-frame or all at once
gives bitwise identical matrices. Classes absent from both prediction and
ground truth contribute NaN per-class IoU and are excluded from the mean.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolationError, DataError


class ConfusionMatrix:
    """K x K matrix of (ground truth row, prediction column) pixel counts."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, preds, labels, ignore_index: int = 255) -> None:
        """Accumulate one batch of integer prediction/label maps."""
        preds = self._to_numpy(preds)
        labels = self._to_numpy(labels)
        if preds.shape != labels.shape:
            raise ContractViolationError(
                f"prediction shape {preds.shape} does not match labels {labels.shape}"
            )
        preds = preds.reshape(-1)
        labels = labels.reshape(-1)
        valid = labels != ignore_index
        preds = preds[valid]
        labels = labels[valid]
        if preds.size == 0:
            return
        k = self.num_classes
        if preds.min() < 0 or preds.max() >= k:
            raise DataError(
                f"predictions must be in [0, {k}), found range [{preds.min()}, {preds.max()}]"
            )
        if labels.min() < 0 or labels.max() >= k:
            raise DataError(
                f"labels must be in [0, {k}) or {ignore_index}, "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        flat = labels.astype(np.int64) * k + preds.astype(np.int64)
        self.matrix += np.bincount(flat, minlength=k * k).reshape(k, k)

    @staticmethod
    def _to_numpy(x) -> np.ndarray:
        if isinstance(x, torch.Tensor):
            x = x.detach().cpu().numpy()
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.integer):
            raise ConfigurationError(f"expected integer class maps, got dtype {x.dtype}")
        return x

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Sum of two matrices over the same class set, as a new matrix."""
        if other.num_classes != self.num_classes:
            raise ContractViolationError(
                f"cannot merge matrices over {self.num_classes} and {other.num_classes} classes"
            )
        merged = ConfusionMatrix(self.num_classes)
        merged.matrix = self.matrix + other.matrix
        return merged

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both preds and labels."""
        tp = np.diag(self.matrix).astype(np.float64)
        gt = self.matrix.sum(axis=1).astype(np.float64)
        pred = self.matrix.sum(axis=0).astype(np.float64)
        union = gt + pred - tp
        iou = np.full(self.num_classes, np.nan, dtype=np.float64)
        present = union > 0
        iou[present] = tp[present] / union[present]
        return iou

    def mean_iou(self) -> float:
        """Mean IoU over classes present in preds or labels."""
        iou = self.per_class_iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise DataError("mean IoU undefined: no pixels have been accumulated")
        return float(iou[present].mean())

    def pixel_accuracy(self) -> float:
        total = self.matrix.sum()
        if total == 0:
            raise DataError("pixel accuracy undefined: no pixels have been accumulated")
        return float(np.diag(self.matrix).sum() / total)


def flip_rate(predictions) -> float:
    """Fraction of pixels whose predicted class changes between consecutive frames.

    ``predictions`` is an integer [T, H, W] stack for one clip, T >= 2. The
    rate averages over all (T - 1) consecutive pairs and all pixels.
    """
    if isinstance(predictions, torch.Tensor):
        predictions = predictions.detach().cpu().numpy()
    predictions = np.asarray(predictions)
    if predictions.ndim != 3:
        raise ConfigurationError(f"expected [T,H,W] predictions, got {predictions.shape}")
    if predictions.shape[0] < 2:
        raise ConfigurationError("flip rate needs at least two frames")
    changes = predictions[1:] != predictions[:-1]
    return float(changes.mean())
