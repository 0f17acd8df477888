"""Experiment configuration: presets, YAML overrides, strict validation.

An experiment config bundles the dataset spec, model config, train config
and stage plan. Two presets exist: ``toy`` (small everything; what the test
suite and the synthetic experiments use) and ``full`` (full-scale recipe:
tiny-variant encoder, 479x479 crops, production learning rates).

A YAML file — and programmatic overrides — are deep-merged onto the chosen
preset: nested dicts merge key-by-key, scalars and lists replace. Unknown
keys anywhere are an error, not a warning; typos must not silently train
the wrong model.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .datagen import DatasetSpec
from .errors import ConfigurationError, DataError
from .network import ModelConfig
from .trainer import StageConfig, StagePlan, TrainConfig

OUTPUT_ROOT_ENV = "TBSEG_OUTPUT_ROOT"

PRESETS = ("toy", "full")


def toy_preset() -> dict:
    return {
        "output_root": "runs/toy",
        "data": {
            "num_clips": 8,
            "frames_per_clip": 12,
            "height": 64,
            "width": 64,
            "num_classes": 4,
            "seed": 0,
            "motion_speed": 2.0,
        },
        "model": {
            "num_classes": 4,
            "patch_size": 4,
            "embed_dim": 24,
            "depths": [2, 2, 2, 2],
            "num_heads": [1, 2, 4, 8],
            "window_size": 4,
            "mlp_ratio": 4.0,
            "spatial_channels": [64, 64, 128],
            "context_channels": 128,
            "fusion_channels": 128,
            "head_mid_channels": 64,
            "use_global_context": True,
            "temporal": False,
            "temporal_offsets": [3, 6, 9],
            "boundary_policy": "clamp_to_first",
            "stop_gradient_references": True,
        },
        "train": {
            "batch_size": 4,
            "crop_h": 64,
            "crop_w": 64,
            "seed": 0,
            "momentum": 0.9,
            "weight_decay": 0.0,
            "lr_schedule": "constant",
            "poly_power": 0.9,
            "ohem_thresh": 0.7,
            "ohem_min_kept": 256,
            "aux_head_weight": 0.4,
            "ignore_index": 255,
        },
        "stages": [
            {"name": "stage1", "loss": "ce", "steps": 2000,
             "lr_context": 0.002, "lr_other": 0.002},
            {"name": "stage2", "loss": "ohem_ce", "steps": 1000,
             "lr_context": 0.0002, "lr_other": 0.0005},
        ],
    }


def full_preset() -> dict:
    """Full-scale recipe; far too heavy for the test suite, kept for reference."""
    cfg = toy_preset()
    cfg["output_root"] = "runs/full"
    cfg["data"] = {
        "num_clips": 64,
        "frames_per_clip": 30,
        "height": 480,
        "width": 853,
        "num_classes": 16,
        "seed": 0,
        "motion_speed": 4.0,
    }
    cfg["model"].update({
        "num_classes": 16,
        "embed_dim": 96,
        "depths": [2, 2, 6, 2],
        "num_heads": [3, 6, 12, 24],
        "window_size": 7,
    })
    cfg["train"].update({
        "batch_size": 8,
        "crop_h": 479,
        "crop_w": 479,
        "weight_decay": 0.0005,
        "ohem_min_kept": 4096,
    })
    cfg["stages"] = [
        {"name": "stage1", "loss": "ce", "steps": 60000,
         "lr_context": 0.002, "lr_other": 0.002},
        {"name": "stage2", "loss": "ohem_ce", "steps": 20000,
         "lr_context": 0.0002, "lr_other": 0.0005},
    ]
    return cfg


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; non-dict values (lists included) replace."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    data: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    plan: StagePlan
    output_root: str

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.plan.validate()
        if self.model.num_classes != self.data.num_classes:
            raise ConfigurationError(
                f"model has {self.model.num_classes} classes but the dataset has "
                f"{self.data.num_classes}"
            )


def _build_section(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r} config: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigurationError(f"invalid {name!r} config: {exc}") from exc


def build_experiment(raw: dict) -> ExperimentConfig:
    known_top = {"preset", "output_root", "variant", "seed", "data", "model", "train", "stages"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")

    model_section = dict(raw.get("model", {}))
    for key in ("depths", "num_heads", "spatial_channels", "temporal_offsets"):
        if key in model_section:
            model_section[key] = tuple(model_section[key])

    variant = raw.get("variant")
    if variant is not None:
        if variant not in ("single_frame", "temporal"):
            raise ConfigurationError(
                f"variant must be 'single_frame' or 'temporal', got {variant!r}"
            )
        model_section["temporal"] = variant == "temporal"

    data_section = dict(raw.get("data", {}))
    train_section = dict(raw.get("train", {}))
    seed = raw.get("seed")
    if seed is not None:
        # one top-level seed makes runs reproducible from (config, seed) alone
        if not isinstance(seed, int):
            raise ConfigurationError(f"seed must be an integer, got {seed!r}")
        data_section["seed"] = seed
        train_section["seed"] = seed

    stages = raw.get("stages", [])
    if not isinstance(stages, list):
        raise ConfigurationError("'stages' must be a list of stage configs")
    plan = StagePlan(stages=[_build_section(StageConfig, s, f"stages[{i}]")
                             for i, s in enumerate(stages)])

    cfg = ExperimentConfig(
        data=_build_section(DatasetSpec, data_section, "data"),
        model=_build_section(ModelConfig, model_section, "model"),
        train=_build_section(TrainConfig, train_section, "train"),
        plan=plan,
        output_root=os.environ.get(OUTPUT_ROOT_ENV) or raw.get("output_root", "runs/default"),
    )
    cfg.validate()
    return cfg


def load_config(path=None, preset: str = "toy", overrides: dict | None = None) -> ExperimentConfig:
    """Preset -> optional YAML file -> optional override dict, later wins."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; available: {PRESETS}")
    raw = toy_preset() if preset == "toy" else full_preset()

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"config file does not exist: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping at top level")
        file_preset = loaded.pop("preset", None)
        if file_preset is not None and file_preset != preset:
            if file_preset not in PRESETS:
                raise ConfigurationError(f"unknown preset {file_preset!r} in {path}")
            raw = toy_preset() if file_preset == "toy" else full_preset()
        raw = deep_merge(raw, loaded)

    if overrides:
        raw = deep_merge(raw, overrides)
    return build_experiment(raw)
