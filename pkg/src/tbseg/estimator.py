"""Estimator-style wrapper: fit on labelled clips, predict label maps.

Thin adapter over the model/trainer pair following scikit-learn
conventions — constructor arguments are stored verbatim as hyperparameters
(so ``get_params``/``set_params``/``clone`` work), fitted state lives in
trailing-underscore attributes, and ``score`` returns mean IoU.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .datagen import IGNORE_INDEX, FrameClip
from .errors import ConfigurationError, DataError
from .metrics import ConfusionMatrix
from .network import ModelConfig, build_model
from .trainer import StageConfig, StagePlan, TrainConfig, Trainer, predict_frames


def _as_clips(X) -> list:
    """Normalize input into a list of clips; accepts FrameClip or (frames, labels)."""
    if isinstance(X, FrameClip):
        X = [X]
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise DataError("expected a non-empty list of clips")
    clips = []
    for i, item in enumerate(X):
        if isinstance(item, FrameClip):
            clips.append(item)
        elif isinstance(item, tuple) and len(item) == 2:
            frames, labels = item
            clips.append(FrameClip(clip_id=f"clip_{i:04d}", frames=list(frames),
                                   labels=list(labels)))
        else:
            raise DataError(
                f"clip {i}: expected a FrameClip or a (frames, labels) pair, got {type(item).__name__}"
            )
    return clips


class TemporalBilateralSegmenter(BaseEstimator):
    """Video semantic segmenter with an optional temporal-context head.

    Parameters mirror the toy training recipe; anything more exotic should
    use :class:`~tbseg.trainer.Trainer` directly.
    """

    def __init__(self, num_classes: int = 4, temporal: bool = False,
                 embed_dim: int = 24, window_size: int = 4,
                 temporal_offsets: tuple = (3, 6, 9),
                 stage1_steps: int = 2000, stage2_steps: int = 1000,
                 stage1_lr: float = 0.002, stage2_lr_context: float = 0.0002,
                 stage2_lr_other: float = 0.0005, lr_schedule: str = "constant",
                 batch_size: int = 4, crop_h: int = 64, crop_w: int = 64,
                 weight_decay: float = 0.0, ohem_min_kept: int = 256,
                 seed: int = 0):
        self.num_classes = num_classes
        self.temporal = temporal
        self.embed_dim = embed_dim
        self.window_size = window_size
        self.temporal_offsets = temporal_offsets
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.stage1_lr = stage1_lr
        self.stage2_lr_context = stage2_lr_context
        self.stage2_lr_other = stage2_lr_other
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.crop_h = crop_h
        self.crop_w = crop_w
        self.weight_decay = weight_decay
        self.ohem_min_kept = ohem_min_kept
        self.seed = seed

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise ConfigurationError("this estimator is not fitted yet; call fit first")

    def fit(self, X, y=None) -> "TemporalBilateralSegmenter":
        """Train on labelled clips. ``y`` is unused (labels ride along in X)."""
        clips = _as_clips(X)
        stages = [StageConfig("stage1", "ce", self.stage1_steps,
                              self.stage1_lr, self.stage1_lr)]
        if self.stage2_steps > 0:
            stages.append(StageConfig("stage2", "ohem_ce", self.stage2_steps,
                                      self.stage2_lr_context, self.stage2_lr_other))
        model_config = ModelConfig(
            num_classes=self.num_classes,
            embed_dim=self.embed_dim,
            window_size=self.window_size,
            temporal=self.temporal,
            temporal_offsets=tuple(self.temporal_offsets),
        )
        train_config = TrainConfig(
            batch_size=self.batch_size, crop_h=self.crop_h, crop_w=self.crop_w,
            seed=self.seed, weight_decay=self.weight_decay,
            lr_schedule=self.lr_schedule, ohem_min_kept=self.ohem_min_kept,
        )
        torch.manual_seed(self.seed)  # weight init; makes fit reproducible
        model = build_model(model_config)
        trainer = Trainer(model, clips, StagePlan(stages=stages), train_config)
        trainer.run()
        self.model_ = model
        self.trainer_ = trainer
        self.history_ = trainer.history
        self.classes_ = np.arange(self.num_classes)
        return self

    def predict(self, X) -> list:
        """Per-clip [T, H, W] arrays of predicted class ids."""
        self._check_fitted()
        return [predict_frames(self.model_, clip) for clip in _as_clips(X)]

    def score(self, X, y=None) -> float:
        """Mean IoU over the given clips' labelled pixels."""
        self._check_fitted()
        clips = _as_clips(X)
        cm = ConfusionMatrix(self.num_classes)
        for clip, preds in zip(clips, self.predict(clips)):
            for t in range(len(clip)):
                cm.update(preds[t], clip.labels[t], IGNORE_INDEX)
        return cm.mean_iou()
