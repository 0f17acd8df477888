"""Two-stage SGD training loop with deterministic sampling and resume.

Stage 1 trains with plain cross-entropy and one shared learning rate;
stage 2 fine-tunes with hard-example-mined cross-entropy and a lower rate
on the context path (encoder + context head) than on the rest. Parameters
are assigned to the two rate groups purely by name prefix.

Determinism: all data sampling flows through one ``numpy.random.Generator``
in a fixed draw order, torch runs single-threaded, and checkpoints carry
both RNG states plus momentum buffers, so a resumed run reproduces the
original loss history bit for bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import CheckpointData, load_checkpoint, model_state, restore_model, save_checkpoint
from .datagen import IGNORE_INDEX, crop_and_flip, draw_crop_flip_params, apply_crop_flip
from .errors import ConfigurationError, DataError, NumericalError
from .losses import OhemConfig, cross_entropy_loss, ohem_cross_entropy
from .metrics import ConfusionMatrix
from .network import BilateralSegNet, ModelConfig, build_model
from .temporal import reference_indices

CONTEXT_PREFIXES = ("backbone.", "context.")
OTHER_PREFIXES = ("spatial.", "ffm.", "head.", "temporal_head.")

LOSS_KINDS = ("ce", "ohem_ce")


def parameter_group(name: str) -> str:
    """'context' or 'other' learning-rate group for a dotted parameter name."""
    if name.startswith(CONTEXT_PREFIXES):
        return "context"
    if name.startswith(OTHER_PREFIXES):
        return "other"
    raise ConfigurationError(
        f"parameter {name!r} matches no learning-rate group; known prefixes: "
        f"{CONTEXT_PREFIXES + OTHER_PREFIXES}"
    )


def lr_schedule(kind: str, base_lr: float, step: int, total_steps: int,
                power: float = 0.9) -> float:
    """Learning rate at ``step`` (0-based) of a ``total_steps``-long stage."""
    if step < 0 or step > total_steps:
        raise ConfigurationError(f"step {step} outside 0..{total_steps}")
    if kind == "constant":
        return base_lr
    if kind == "poly":
        return base_lr * (1.0 - step / total_steps) ** power
    raise ConfigurationError(f"unknown lr schedule {kind!r} (use 'constant' or 'poly')")


@dataclass
class StageConfig:
    name: str
    loss: str
    steps: int
    lr_context: float
    lr_other: float

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"stage {self.name!r}: unknown loss {self.loss!r}")
        if self.steps < 1:
            raise ConfigurationError(f"stage {self.name!r}: steps must be >= 1, got {self.steps}")
        if self.lr_context <= 0 or self.lr_other <= 0:
            raise ConfigurationError(f"stage {self.name!r}: learning rates must be positive")
        if self.name == "stage1":
            if self.loss != "ce":
                raise ConfigurationError("stage1 must train with plain cross-entropy")
            if self.lr_context != self.lr_other:
                raise ConfigurationError("stage1 uses a single learning rate for all parameters")
        if self.name == "stage2" and self.loss != "ohem_ce":
            raise ConfigurationError("stage2 must train with hard-example-mined cross-entropy")


@dataclass
class StagePlan:
    stages: list

    def validate(self) -> None:
        if not self.stages:
            raise ConfigurationError("stage plan has no stages")
        for s in self.stages:
            s.validate()

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def to_dict(self) -> dict:
        return {"stages": [dataclasses.asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        plan = cls(stages=[StageConfig(**s) for s in d["stages"]])
        plan.validate()
        return plan


def default_two_stage_plan(stage1_steps: int = 2000, stage2_steps: int = 1000,
                           stage1_lr: float = 0.002,
                           stage2_lr_context: float = 0.0002,
                           stage2_lr_other: float = 0.0005) -> StagePlan:
    return StagePlan(stages=[
        StageConfig("stage1", "ce", stage1_steps, stage1_lr, stage1_lr),
        StageConfig("stage2", "ohem_ce", stage2_steps, stage2_lr_context, stage2_lr_other),
    ])


@dataclass
class TrainConfig:
    batch_size: int = 4
    crop_h: int = 64
    crop_w: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    poly_power: float = 0.9
    ohem_thresh: float = 0.7
    ohem_min_kept: int = 256
    aux_head_weight: float = 0.4
    ignore_index: int = IGNORE_INDEX

    def validate(self) -> None:
        if self.batch_size < 2:
            # batch-norm gates normalize pooled 1x1 maps over the batch,
            # which needs more than one sample in train mode
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.crop_h < 1 or self.crop_w < 1:
            raise ConfigurationError("crop size must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.aux_head_weight < 0:
            raise ConfigurationError(
                f"aux_head_weight must be >= 0, got {self.aux_head_weight}"
            )
        OhemConfig(self.ohem_thresh, self.ohem_min_kept).validate()

    def ohem_config(self) -> OhemConfig:
        return OhemConfig(prob_threshold=self.ohem_thresh, min_kept=self.ohem_min_kept)


def sgd_apply(named_params, grads: dict, momentum_buffers: dict, lrs: dict,
              momentum: float, weight_decay: float) -> None:
    """One SGD-with-momentum update across all parameters, atomically.

    update rule per parameter:  buf <- momentum * buf + (grad + wd * p);
    p <- p - lr * buf.  Every candidate buffer and parameter value is
    checked for finiteness before anything is written, so a blown-up step
    leaves the model untouched and raises naming the offending parameter.
    """
    staged = []
    for name, param in named_params:
        grad = grads.get(name)
        if grad is None:
            continue
        if not bool(torch.isfinite(grad).all()):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        buf = momentum_buffers.get(name)
        if buf is None:
            buf = torch.zeros_like(param)
        step_dir = grad if weight_decay == 0.0 else grad + weight_decay * param.detach()
        new_buf = momentum * buf + step_dir
        new_param = param.detach() - lrs[name] * new_buf
        if not bool(torch.isfinite(new_param).all()):
            raise NumericalError(f"non-finite update for parameter {name!r}")
        staged.append((name, param, new_buf, new_param))
    with torch.no_grad():
        for name, param, new_buf, new_param in staged:
            momentum_buffers[name] = new_buf
            param.copy_(new_param)


class Trainer:
    """Runs a stage plan over in-memory clips; checkpointable at any step."""

    def __init__(self, model: BilateralSegNet, clips: list, plan: StagePlan,
                 config: TrainConfig | None = None):
        torch.set_num_threads(1)  # bitwise reproducibility across machines
        self.model = model
        self.config = config or TrainConfig()
        self.config.validate()
        plan.validate()
        self.plan = plan
        if not clips:
            raise DataError("no training clips provided")
        for clip in clips:
            clip.validate(num_classes=model.config.num_classes)
        self.clips = clips
        self.temporal = model.config.temporal

        self.rng = np.random.default_rng(self.config.seed)
        self.momentum_buffers: dict = {}
        self.history: list = []
        self.global_step = 0
        self.stage_index = 0
        self.step_in_stage = 0

        # lr-group membership is fixed by architecture; fail fast if a parameter
        # is added under an unknown prefix
        self._groups = {name: parameter_group(name) for name, _ in model.named_parameters()}

    # ------------------------------------------------------------------ data

    def _draw_single_frame_sample(self):
        clip = self.clips[int(self.rng.integers(len(self.clips)))]
        t = int(self.rng.integers(len(clip)))
        frame, label = clip.frame(t)
        return crop_and_flip(frame, label, self.config.crop_h, self.config.crop_w, self.rng)

    def _draw_temporal_sample(self):
        clip = self.clips[int(self.rng.integers(len(self.clips)))]
        t = int(self.rng.integers(len(clip)))
        refs = reference_indices(t, self.model.config.temporal_offsets, len(clip))
        frame, label = clip.frame(t)
        params = draw_crop_flip_params(frame.shape[1], frame.shape[2],
                                       self.config.crop_h, self.config.crop_w, self.rng)
        frame, label = apply_crop_flip(frame, label, params)
        ref_frames = []
        for i in refs:
            rf, _ = apply_crop_flip(clip.frames[i], None, params)
            ref_frames.append(rf)
        return frame, ref_frames, label

    def _sample_batch(self):
        cfg = self.config
        if not self.temporal:
            frames, labels = [], []
            for _ in range(cfg.batch_size):
                f, l = self._draw_single_frame_sample()
                frames.append(f)
                labels.append(l)
            return (torch.from_numpy(np.stack(frames)),
                    torch.from_numpy(np.stack(labels).astype(np.int64)))
        frames, labels = [], []
        refs_per_offset = [[] for _ in self.model.config.temporal_offsets]
        for _ in range(cfg.batch_size):
            f, refs, l = self._draw_temporal_sample()
            frames.append(f)
            labels.append(l)
            for k, rf in enumerate(refs):
                refs_per_offset[k].append(rf)
        return (torch.from_numpy(np.stack(frames)),
                [torch.from_numpy(np.stack(r)) for r in refs_per_offset],
                torch.from_numpy(np.stack(labels).astype(np.int64)))

    # ----------------------------------------------------------------- steps

    def _current_stage(self) -> StageConfig:
        return self.plan.stages[self.stage_index]

    def _loss_fn(self, stage: StageConfig, logits: torch.Tensor,
                 labels: torch.Tensor) -> torch.Tensor:
        if stage.loss == "ce":
            return cross_entropy_loss(logits, labels, self.config.ignore_index)
        return ohem_cross_entropy(logits, labels, self.config.ignore_index,
                                  config=self.config.ohem_config())

    def _bn_snapshot(self) -> dict:
        return {name: buf.clone() for name, buf in self.model.named_buffers()
                if "relative_position_index" not in name}

    def _restore_bn(self, snapshot: dict) -> None:
        with torch.no_grad():
            for name, buf in self.model.named_buffers():
                if name in snapshot:
                    buf.copy_(snapshot[name])

    def _temporal_forward(self, frames, ref_frames):
        """Logits for a temporal batch: references use eval-mode statistics.

        Reference maps are detached from the graph unless the model config
        disables ``stop_gradient_references`` (then gradients flow through
        them while batch-norm still uses running statistics).
        """
        self.model.eval()
        if self.model.config.stop_gradient_references:
            with torch.no_grad():
                ref_feats = [self.model.extract(r) for r in ref_frames]
        else:
            ref_feats = [self.model.extract(r) for r in ref_frames]
        self.model.train()
        current = self.model.extract(frames)
        return self.model.forward_temporal(current, ref_feats), current

    def step(self) -> dict:
        """One optimization step; returns the history record it appended."""
        if self.done:
            raise ConfigurationError("stage plan already completed")
        stage = self._current_stage()
        lr_c = lr_schedule(self.config.lr_schedule, stage.lr_context,
                           self.step_in_stage, stage.steps, self.config.poly_power)
        lr_o = lr_schedule(self.config.lr_schedule, stage.lr_other,
                           self.step_in_stage, stage.steps, self.config.poly_power)
        lrs = {name: (lr_c if group == "context" else lr_o)
               for name, group in self._groups.items()}

        snapshot = self._bn_snapshot()
        try:
            if self.temporal:
                frames, ref_frames, labels = self._sample_batch()
                logits, current = self._temporal_forward(frames, ref_frames)
                loss = self._loss_fn(stage, logits, labels)
                if self.config.aux_head_weight > 0:
                    # keep the single-frame head trained so neither branch dies
                    aux = self._loss_fn(stage, self.model.head(current), labels)
                    loss = loss + self.config.aux_head_weight * aux
            else:
                frames, labels = self._sample_batch()
                self.model.train()
                logits = self.model(frames)
                loss = self._loss_fn(stage, logits, labels)
            if not bool(torch.isfinite(loss)):
                raise NumericalError(f"non-finite loss at step {self.global_step}")
            self.model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in self.model.named_parameters()
                     if p.grad is not None}
            sgd_apply(list(self.model.named_parameters()), grads, self.momentum_buffers,
                      lrs, self.config.momentum, self.config.weight_decay)
        except NumericalError:
            self._restore_bn(snapshot)
            raise

        record = {
            "step": self.global_step,
            "stage": stage.name,
            "loss": float(loss.detach()),
            "lr_context": lr_c,
            "lr_other": lr_o,
        }
        self.history.append(record)
        self.global_step += 1
        self.step_in_stage += 1
        if self.step_in_stage >= stage.steps and self.stage_index < len(self.plan.stages) - 1:
            self.stage_index += 1
            self.step_in_stage = 0
        return record

    @property
    def done(self) -> bool:
        stage = self.plan.stages[self.stage_index]
        return (self.stage_index == len(self.plan.stages) - 1
                and self.step_in_stage >= stage.steps)

    def run(self, num_steps: int | None = None, on_step=None) -> list:
        """Run ``num_steps`` steps (or to plan completion); returns new records."""
        start = len(self.history)
        while not self.done and (num_steps is None or len(self.history) - start < num_steps):
            record = self.step()
            if on_step is not None:
                on_step(record)
        return self.history[start:]

    # ------------------------------------------------------------ checkpoint

    def to_checkpoint(self) -> CheckpointData:
        params, buffers = model_state(self.model)
        return CheckpointData(
            model_config=self.model.config,
            params=params,
            buffers=buffers,
            momentum=dict(self.momentum_buffers),
            counters={
                "global_step": self.global_step,
                "stage_index": self.stage_index,
                "step_in_stage": self.step_in_stage,
                "history": self.history,
                "train_config": dataclasses.asdict(self.config),
            },
            stage_plan=self.plan.to_dict(),
            numpy_rng_state=_jsonable_rng_state(self.rng),
            torch_rng_state=torch.get_rng_state().numpy(),
        )

    def save(self, path) -> None:
        save_checkpoint(path, self.to_checkpoint())

    @classmethod
    def resume(cls, path, clips: list) -> "Trainer":
        """Rebuild a trainer mid-plan from a checkpoint; training continues
        exactly as if the original process had kept going."""
        ckpt = load_checkpoint(path)
        model = build_model(ckpt.model_config)
        restore_model(model, ckpt)
        counters = ckpt.counters
        config = TrainConfig(**counters["train_config"])
        plan = StagePlan.from_dict(ckpt.stage_plan)
        trainer = cls(model, clips, plan, config)
        trainer.global_step = counters["global_step"]
        trainer.stage_index = counters["stage_index"]
        trainer.step_in_stage = counters["step_in_stage"]
        trainer.history = list(counters.get("history", []))
        trainer.momentum_buffers = {
            name: torch.from_numpy(np.asarray(arr, order="C"))
            for name, arr in ckpt.momentum.items()
        }
        if ckpt.numpy_rng_state is not None:
            trainer.rng.bit_generator.state = ckpt.numpy_rng_state
        if ckpt.torch_rng_state is not None:
            torch.set_rng_state(torch.from_numpy(np.asarray(ckpt.torch_rng_state, order="C")))
        return trainer


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    """numpy Generator state with every value as a plain JSON type."""

    def convert(obj):
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return obj

    return convert(rng.bit_generator.state)


# ---------------------------------------------------------------------- eval

@torch.no_grad()
def predict_frames(model: BilateralSegNet, clip, temporal: bool | None = None) -> np.ndarray:
    """Predicted class ids [T, H, W] for every frame of one clip."""
    temporal = model.config.temporal if temporal is None else temporal
    was_training = model.training
    model.eval()
    try:
        if temporal:
            logits = model.forward_video(clip.frames, clip_id=clip.clip_id)
            return logits.argmax(dim=1).numpy()
        preds = []
        for frame in clip.frames:
            logit = model(torch.as_tensor(frame, dtype=torch.float32).unsqueeze(0))
            preds.append(logit.argmax(dim=1)[0].numpy())
        return np.stack(preds)
    finally:
        model.train(was_training)


def evaluate_clips(model: BilateralSegNet, clips: list, temporal: bool | None = None,
                   ignore_index: int = IGNORE_INDEX) -> dict:
    """Mean IoU, pixel accuracy and per-class IoU of a model over whole clips."""
    cm = ConfusionMatrix(model.config.num_classes)
    for clip in clips:
        preds = predict_frames(model, clip, temporal=temporal)
        for t in range(len(clip)):
            cm.update(preds[t], clip.labels[t], ignore_index)
    iou = cm.per_class_iou()
    return {
        "mean_iou": cm.mean_iou(),
        "pixel_accuracy": cm.pixel_accuracy(),
        "per_class_iou": [None if math.isnan(v) else float(v) for v in iou],
    }
