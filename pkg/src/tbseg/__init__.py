"""Temporal bilateral video segmentation: models, training recipe, tooling."""

from .datagen import (IGNORE_INDEX, DatasetSpec, FrameClip, generate_clip,
                      generate_dataset, load_vspw_dir, export_vspw_layout)
from .errors import (ConfigurationError, ContractViolationError, DataError,
                     NumericalError, TbsegError)
from .estimator import TemporalBilateralSegmenter
from .featuremap import FeatureMap
from .losses import OhemConfig, cross_entropy_loss, ohem_cross_entropy
from .metrics import ConfusionMatrix, flip_rate
from .network import BilateralSegNet, ModelConfig, build_model
from .temporal import (FeatureCache, TemporalBilateralNet, reference_indices,
                       temporal_average)
from .trainer import (StageConfig, StagePlan, TrainConfig, Trainer,
                      default_two_stage_plan, evaluate_clips, predict_frames)

__version__ = "0.1.0"

__all__ = [
    "IGNORE_INDEX",
    "BilateralSegNet",
    "ConfigurationError",
    "ConfusionMatrix",
    "ContractViolationError",
    "DataError",
    "DatasetSpec",
    "FeatureCache",
    "FeatureMap",
    "FrameClip",
    "ModelConfig",
    "NumericalError",
    "OhemConfig",
    "StageConfig",
    "StagePlan",
    "TbsegError",
    "TemporalBilateralNet",
    "TemporalBilateralSegmenter",
    "TrainConfig",
    "Trainer",
    "build_model",
    "cross_entropy_loss",
    "default_two_stage_plan",
    "evaluate_clips",
    "export_vspw_layout",
    "flip_rate",
    "generate_clip",
    "generate_dataset",
    "load_vspw_dir",
    "ohem_cross_entropy",
    "predict_frames",
    "reference_indices",
    "temporal_average",
]
