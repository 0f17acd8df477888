"""Command-line interface.

Subcommands:

- ``gen-data``  render a synthetic clip dataset to disk
- ``train``     train (or resume) a model on an on-disk dataset
- ``eval``      write a metrics report for a checkpoint
- ``predict``   write predicted mask PNGs for a dataset split
- ``ablate``    train the four recipe variants and print a results table
- ``plot``      render training-history curves to PNG images

Every command is reproducible from its config file and seed alone. Exit
codes: 0 success, 1 configuration/usage error, 2 data or I/O error,
3 numerical failure during optimization.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import OUTPUT_ROOT_ENV, PRESETS, load_config
from .datagen import class_palette, export_vspw_layout, generate_dataset, load_vspw_dir
from .errors import ConfigurationError, DataError, NumericalError, TbsegError
from .metrics import flip_rate
from .network import build_model
from .checkpoint import load_checkpoint, restore_model
from .trainer import StagePlan, Trainer, evaluate_clips, predict_frames

VARIANTS = ("single_frame", "temporal")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as configuration errors (exit 1)."""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML overrides on top of the preset")
    p.add_argument("--preset", default="toy", choices=PRESETS)
    p.add_argument("--seed", type=int, default=None,
                   help="override both the data and training seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data",
                       help="render a synthetic clip dataset to disk")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset root directory to create")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", default="train")
    p.add_argument("--out", default=None,
                   help=f"run directory (default: config output_root, or ${OUTPUT_ROOT_ENV})")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None,
                   help="stop after this many steps instead of finishing the plan")
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="override the config's model variant")
    p.add_argument("--eval-every", type=int, default=0,
                   help="record training-split mIoU every N steps (0 = never)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", default=None,
                   help="report directory (default: the checkpoint's directory)")
    p.add_argument("--flip-rate", action="store_true",
                   help="also report the temporal prediction flip rate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--color", action="store_true",
                   help="also write palette-colored mask images")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate",
                       help="train the four recipe variants and print a table")
    _add_config_args(p)
    p.add_argument("--stage1-steps", type=int, default=None,
                   help="override stage-1 length for every variant")
    p.add_argument("--stage2-steps", type=int, default=None,
                   help="override stage-2 length for every variant")
    p.add_argument("--out", default=None, help="also write the table as JSON here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="plot training history curves")
    p.add_argument("--history", required=True, help="history file written by train")
    p.add_argument("--out-dir", required=True, help="directory for the PNG images")
    p.set_defaults(func=cmd_plot)

    return parser


def _overrides_from(args, extra: dict | None = None) -> dict | None:
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return overrides or None


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, preset=args.preset, overrides=_overrides_from(args))
    clips = generate_dataset(cfg.data)
    export_vspw_layout(clips, args.out, split=args.split)
    print(f"wrote {len(clips)} clips "
          f"({cfg.data.frames_per_clip} frames, {cfg.data.height}x{cfg.data.width}, "
          f"{cfg.data.num_classes} classes) to {args.out}")
    return 0


def _load_clips(root: str, split: str) -> list:
    return [desc.load() for desc in load_vspw_dir(root, split)]


def _write_history(path: Path, history: list) -> None:
    # one JSON record per line so partial histories stay parseable; sorted
    # keys so resumed and uninterrupted runs write identical bytes
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _read_history(path: Path) -> list:
    if not path.is_file():
        raise DataError(f"history file does not exist: {path}")
    text = path.read_text()
    records = []
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{i + 1} is not a JSON record: {exc}") from exc
    if not records:
        raise DataError(f"history file {path} is empty")
    return records


def cmd_train(args) -> int:
    extra = None
    if args.variant is not None:
        extra = {"variant": args.variant}
    cfg = load_config(args.config, preset=args.preset, overrides=_overrides_from(args, extra))
    clips = _load_clips(args.data, args.split)

    out_dir = Path(args.out) if args.out else Path(cfg.output_root)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.zip"
    history_path = out_dir / "history.jsonl"

    if args.resume:
        trainer = Trainer.resume(args.resume, clips)
        print(f"resumed at step {trainer.global_step} from {args.resume}")
    else:
        # weight init draws from the torch RNG; seed it so that repeated
        # runs of the same (config, seed) are bit-identical
        torch.manual_seed(cfg.train.seed)
        trainer = Trainer(build_model(cfg.model), clips, cfg.plan, cfg.train)

    def on_step(record):
        if args.eval_every and (record["step"] + 1) % args.eval_every == 0:
            record["val_miou"] = round(evaluate_clips(trainer.model, clips)["mean_iou"], 6)
        if record["step"] % args.log_every == 0 or record["step"] == trainer.plan.total_steps - 1:
            extra = f" miou {record['val_miou']:.4f}" if "val_miou" in record else ""
            print(f"step {record['step']:6d} [{record['stage']}] "
                  f"loss {record['loss']:.4f} lr {record['lr_other']:.2e}{extra}")

    try:
        trainer.run(num_steps=args.steps, on_step=on_step)
    except NumericalError:
        # the failed update was never applied; keep the last good state
        trainer.save(ckpt_path)
        _write_history(history_path, trainer.history)
        print(f"aborted; last good state kept at {ckpt_path}", file=sys.stderr)
        raise

    trainer.save(ckpt_path)
    _write_history(history_path, trainer.history)
    print(f"saved checkpoint to {ckpt_path} after {trainer.global_step} steps")
    return 0


def _load_model(checkpoint_path: str):
    ckpt = load_checkpoint(checkpoint_path)
    model = build_model(ckpt.model_config)
    restore_model(model, ckpt)
    model.eval()
    return model


def format_eval_report(report: dict, flip: float | None = None) -> str:
    lines = ["class  iou", "-----  ------"]
    for cls, iou in enumerate(report["per_class_iou"]):
        shown = "absent (excluded from mean)" if iou is None else f"{iou:.4f}"
        lines.append(f"{cls:>5}  {shown}")
    lines.append("")
    lines.append(f"mean IoU over present classes: {report['mean_iou']:.4f}")
    lines.append(f"pixel accuracy:                {report['pixel_accuracy']:.4f}")
    if flip is not None:
        lines.append(f"prediction flip rate:          {flip:.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    clips = _load_clips(args.data, args.split)
    report = evaluate_clips(model, clips)

    flip = None
    if args.flip_rate:
        rates = [flip_rate(predict_frames(model, clip)) for clip in clips]
        flip = float(np.mean(rates))

    machine = {
        "mean_iou": report["mean_iou"],
        "pixel_accuracy": report["pixel_accuracy"],
        "excluded_classes": [c for c, v in enumerate(report["per_class_iou"]) if v is None],
    }
    for cls, iou in enumerate(report["per_class_iou"]):
        machine[f"class_{cls}_iou"] = iou
    if flip is not None:
        machine["flip_rate"] = flip

    text = format_eval_report(report, flip)
    print(text)

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(text + "\n")
    (out_dir / "report.json").write_text(json.dumps(machine, indent=2) + "\n")
    print(f"wrote {out_dir / 'report.txt'} and {out_dir / 'report.json'}")
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    model = _load_model(args.checkpoint)
    clips = _load_clips(args.data, args.split)
    out_root = Path(args.out)
    palette = None
    if args.color:
        colors = class_palette(model.config.num_classes)  # float32 in [0, 1]
        palette = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    for clip in clips:
        preds = predict_frames(model, clip)
        pred_dir = out_root / clip.clip_id / "pred"
        pred_dir.mkdir(parents=True, exist_ok=True)
        for t in range(preds.shape[0]):
            mask = preds[t].astype(np.uint8)
            Image.fromarray(mask, mode="L").save(pred_dir / f"{t:05d}.png")
            if palette is not None:
                Image.fromarray(palette[mask], mode="RGB").save(
                    pred_dir / f"{t:05d}_color.png")
    print(f"wrote predictions for {len(clips)} clips to {out_root}")
    return 0


ABLATION_ROWS = (
    # (label, temporal model?, include stage 2?)
    ("single_frame + CE", False, False),
    ("single_frame + OHEM", False, True),
    ("temporal + CE", True, False),
    ("temporal + OHEM", True, True),
)


def run_ablation(cfg, train_clips, val_clips, stage1_steps=None, stage2_steps=None,
                 on_row=None) -> list:
    """Train the four recipe variants; return [{'method','mean_iou','boost'}].

    Rows with OHEM are the full two-stage recipe; CE rows stop after stage 1.
    mIoU comes from the validation clips. Boost is each row's rounded mIoU
    minus the previous row's, so the printed table is exactly
    self-consistent; the first row has no predecessor.
    """
    rows = []
    for label, temporal, two_stage in ABLATION_ROWS:
        # identical init stream per row: rows differ by recipe, not by luck
        torch.manual_seed(cfg.train.seed)
        model_cfg = dataclasses.replace(cfg.model, temporal=temporal)
        stages = [dataclasses.replace(cfg.plan.stages[0])]
        if stage1_steps:
            stages[0].steps = stage1_steps
        if two_stage:
            if len(cfg.plan.stages) < 2:
                raise ConfigurationError("ablation needs a two-stage plan in the config")
            stages.append(dataclasses.replace(cfg.plan.stages[1]))
            if stage2_steps:
                stages[1].steps = stage2_steps
        trainer = Trainer(build_model(model_cfg), train_clips,
                          StagePlan(stages=stages), cfg.train)
        trainer.run()
        miou = round(evaluate_clips(trainer.model, val_clips)["mean_iou"], 4)
        boost = None if not rows else round(miou - rows[-1]["mean_iou"], 4)
        rows.append({"method": label, "mean_iou": miou, "boost": boost})
        if on_row is not None:
            on_row(rows[-1])
    return rows


def format_ablation_table(rows: list) -> str:
    width = max(len("Methods"), max(len(r["method"]) for r in rows))
    lines = [f"{'Methods':<{width}}  {'mIoU':>7}  {'Boost':>7}"]
    for row in rows:
        boost = "-" if row["boost"] is None else f"{row['boost']:+.4f}"
        lines.append(f"{row['method']:<{width}}  {row['mean_iou']:7.4f}  {boost:>7}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, preset=args.preset, overrides=_overrides_from(args))
    train_clips = generate_dataset(cfg.data)
    # held-out clips: same spec, disjoint seed
    val_spec = dataclasses.replace(cfg.data, seed=cfg.data.seed + 1,
                                   num_clips=max(2, cfg.data.num_clips // 4))
    val_clips = generate_dataset(val_spec)

    def on_row(row):
        print(f"finished {row['method']}: mIoU {row['mean_iou']:.4f}")

    rows = run_ablation(cfg, train_clips, val_clips, stage1_steps=args.stage1_steps,
                        stage2_steps=args.stage2_steps, on_row=on_row)
    print(format_ablation_table(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    history = _read_history(Path(args.history))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for stage in sorted({r["stage"] for r in history}):
        records = [r for r in history if r["stage"] == stage]
        ax.plot([r["step"] for r in records], [r["loss"] for r in records],
                label=stage, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    loss_path = out_dir / "loss.png"
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    written.append(loss_path)

    with_miou = [r for r in history if "val_miou" in r]
    if with_miou:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        ax.plot([r["step"] for r in with_miou], [r["val_miou"] for r in with_miou],
                marker="o", markersize=3, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("mean IoU")
        ax.set_ylim(0.0, 1.0)
        fig.tight_layout()
        miou_path = out_dir / "miou.png"
        fig.savefig(miou_path, dpi=120)
        plt.close(fig)
        written.append(miou_path)
    else:
        print("history has no val_miou records; skipping the mIoU curve "
              "(train with --eval-every to record it)")

    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except TbsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
