"""Synthetic video clips with dense labels, plus VSPW-layout dataset IO.

Synthetic clips contain moving colored shapes (rectangles and circles) over a
flat background; each shape's pixels carry its class id in the label map, so
a small network can learn the task from color alone. Motion is toroidal so
class pixel counts stay roughly stable across frames.

Real datasets are read from the on-disk layout
``<root>/<video_id>/origin/*.png`` for frames,
``<root>/<video_id>/mask/*.png`` for single-channel class-id masks, and
``<root>/<split>.txt`` listing the video ids of a split.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError

IGNORE_INDEX = 255

NOISE_SIGMA = 0.02


@dataclass
class FrameClip:
    """An ordered sequence of RGB frames with aligned per-pixel label maps.

    frames: list of [3, H, W] float32 arrays with values in [0, 1]
    labels: list of [H, W] integer arrays with class ids or IGNORE_INDEX
    """

    clip_id: str
    frames: list
    labels: list
    fps: float = 15.0

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, index: int):
        return self.frames[index], self.labels[index]

    def validate(self, num_classes: int | None = None) -> None:
        if len(self.frames) < 1 or len(self.frames) != len(self.labels):
            raise DataError(
                f"clip {self.clip_id!r}: needs >= 1 frame and as many labels as frames "
                f"(got {len(self.frames)} frames, {len(self.labels)} labels)"
            )
        hw = self.frames[0].shape[1:]
        for i, (f, l) in enumerate(zip(self.frames, self.labels)):
            if f.ndim != 3 or f.shape[0] != 3:
                raise DataError(f"clip {self.clip_id!r} frame {i}: expected [3,H,W], got {f.shape}")
            if f.shape[1:] != hw or l.shape != hw:
                raise DataError(
                    f"clip {self.clip_id!r} frame {i}: inconsistent sizes {f.shape[1:]} vs {l.shape} vs {hw}"
                )
            if num_classes is not None:
                vals = np.unique(l)
                bad = vals[(vals != IGNORE_INDEX) & ((vals < 0) | (vals >= num_classes))]
                if bad.size:
                    raise DataError(
                        f"clip {self.clip_id!r} frame {i}: label values {bad.tolist()} outside "
                        f"0..{num_classes - 1} and ignore index {IGNORE_INDEX}"
                    )


@dataclass
class DatasetSpec:
    """Parameters of a deterministic synthetic dataset."""

    num_clips: int
    frames_per_clip: int
    height: int
    width: int
    num_classes: int
    seed: int = 0
    motion_speed: float = 2.0

    def validate(self) -> None:
        if self.num_clips < 1:
            raise ConfigurationError(f"num_clips must be >= 1, got {self.num_clips}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.frames_per_clip < 10:
            raise ConfigurationError(
                f"frames_per_clip must be >= 10 so the longest frame offset exists, got {self.frames_per_clip}"
            )
        if self.height < 32 or self.width < 32:
            raise ConfigurationError(f"height/width must be >= 32, got {self.height}x{self.width}")


def class_palette(num_classes: int) -> np.ndarray:
    """[K, 3] float32 colors: dark background plus evenly spaced saturated hues."""
    palette = np.zeros((num_classes, 3), dtype=np.float32)
    palette[0] = (0.12, 0.12, 0.12)
    for c in range(1, num_classes):
        hue = (c - 1) / max(1, num_classes - 1)
        palette[c] = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    return palette


def _toroidal_delta(coords: np.ndarray, center: float, extent: int) -> np.ndarray:
    d = np.abs(coords - (center % extent))
    return np.minimum(d, extent - d)


def generate_clip(spec: DatasetSpec, clip_index: int) -> FrameClip:
    """Deterministically render one clip of moving shapes.

    A pure function of (spec, clip_index): classes 1..K-1 each get one shape
    (circles and rectangles alternate randomly) translating by
    ``spec.motion_speed`` pixels per frame with toroidal wrap-around. Pixel
    noise (sigma 0.02) is added to frames only; labels stay exact.
    """
    spec.validate()
    if clip_index >= spec.num_clips or clip_index < 0:
        raise ConfigurationError(f"clip_index {clip_index} out of range for {spec.num_clips} clips")

    rng = np.random.default_rng([abs(spec.seed), clip_index])
    h, w = spec.height, spec.width
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]

    shapes = []
    for _ in range(1, spec.num_classes):
        kind = "circle" if rng.random() < 0.5 else "rect"
        # generous sizes: boundary length per area stays small enough to segment well
        size = rng.uniform(0.20, 0.30) * min(h, w)
        cy0, cx0 = rng.uniform(0, h), rng.uniform(0, w)
        angle = rng.uniform(0, 2 * np.pi)
        vel = (spec.motion_speed * np.sin(angle), spec.motion_speed * np.cos(angle))
        aspect = rng.uniform(0.7, 1.4)
        shapes.append((kind, size, cy0, cx0, vel, aspect))

    palette = class_palette(spec.num_classes)
    labels = []
    for t in range(spec.frames_per_clip):
        label = np.zeros((h, w), dtype=np.uint8)
        for cls, (kind, size, cy0, cx0, (vy, vx), aspect) in enumerate(shapes, start=1):
            cy, cx = cy0 + t * vy, cx0 + t * vx
            dy = _toroidal_delta(yy, cy, h)
            dx = _toroidal_delta(xx, cx, w)
            if kind == "circle":
                mask = dy * dy + dx * dx <= size * size
            else:
                mask = (dy <= size * aspect) & (dx <= size / aspect)
            label[mask] = cls
        labels.append(label)

    frames = []
    for t in range(spec.frames_per_clip):
        clean = palette[labels[t]].transpose(2, 0, 1)
        noisy = clean + rng.normal(0.0, NOISE_SIGMA, size=clean.shape)
        frames.append(np.clip(noisy, 0.0, 1.0).astype(np.float32))

    return FrameClip(clip_id=f"clip_{clip_index:04d}", frames=frames, labels=labels)


def generate_dataset(spec: DatasetSpec) -> list[FrameClip]:
    return [generate_clip(spec, i) for i in range(spec.num_clips)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropFlipParams:
    """One drawn spatial transform, reusable across the frames of a clip."""

    top: int
    left: int
    crop_h: int
    crop_w: int
    flip: bool


def draw_crop_flip_params(height: int, width: int, crop_h: int, crop_w: int,
                          rng: np.random.Generator) -> CropFlipParams:
    """Draw a random crop offset and flip bit. Draw order: top, left, flip."""
    padded_h = max(height, crop_h)
    padded_w = max(width, crop_w)
    top = int(rng.integers(0, padded_h - crop_h + 1))
    left = int(rng.integers(0, padded_w - crop_w + 1))
    flip = bool(rng.random() < 0.5)
    return CropFlipParams(top=top, left=left, crop_h=crop_h, crop_w=crop_w, flip=flip)


def apply_crop_flip(frame: np.ndarray, label: np.ndarray | None, params: CropFlipParams):
    """Apply one drawn transform identically to a frame and its label map.

    Images smaller than the crop are padded bottom/right first: frames with
    zeros, labels with IGNORE_INDEX.
    """
    h, w = frame.shape[1:]
    pad_h = max(0, params.crop_h - h)
    pad_w = max(0, params.crop_w - w)
    if pad_h or pad_w:
        frame = np.pad(frame, ((0, 0), (0, pad_h), (0, pad_w)))
        if label is not None:
            label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_INDEX)
    t, l = params.top, params.left
    frame = frame[:, t:t + params.crop_h, l:l + params.crop_w]
    if params.flip:
        frame = frame[:, :, ::-1]
    frame = np.ascontiguousarray(frame)
    if label is None:
        return frame, None
    label = label[t:t + params.crop_h, l:l + params.crop_w]
    if params.flip:
        label = label[:, ::-1]
    return frame, np.ascontiguousarray(label)


def crop_and_flip(frame: np.ndarray, label: np.ndarray, crop_h: int, crop_w: int,
                  rng: np.random.Generator):
    """Random crop (with minimal padding) plus 50% horizontal flip."""
    params = draw_crop_flip_params(frame.shape[1], frame.shape[2], crop_h, crop_w, rng)
    return apply_crop_flip(frame, label, params)


# ---------------------------------------------------------------------------
# VSPW-layout IO
# ---------------------------------------------------------------------------

@dataclass
class ClipDescriptor:
    """Lazy handle on one on-disk video: frames are read on demand."""

    clip_id: str
    frame_paths: list
    mask_paths: list  # entry is None when the frame has no mask
    fps: float = 15.0

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frame(self, index: int):
        fpath = self.frame_paths[index]
        frame = _read_frame(fpath)
        h, w = frame.shape[1:]
        mpath = self.mask_paths[index]
        if mpath is None:
            label = np.full((h, w), IGNORE_INDEX, dtype=np.uint8)
        else:
            label = np.asarray(Image.open(mpath).convert("L"), dtype=np.uint8)
            if label.shape != (h, w):
                raise DataError(
                    f"mask size {label.shape} does not match frame size {(h, w)} for {mpath}"
                )
        return frame, label

    def load(self) -> FrameClip:
        frames, labels = [], []
        for i in range(len(self)):
            f, l = self.frame(i)
            frames.append(f)
            labels.append(l)
        return FrameClip(clip_id=self.clip_id, frames=frames, labels=labels, fps=self.fps)


def _read_frame(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_vspw_dir(root, split: str) -> list[ClipDescriptor]:
    """List the clips of one split as lazy descriptors, sorted by video id.

    Frames without a matching mask (by filename stem) get all-ignore labels
    so partially annotated clips remain usable.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    split_file = root / f"{split}.txt"
    if not split_file.is_file():
        raise DataError(f"split file does not exist: {split_file}")

    video_ids = sorted(line.strip() for line in split_file.read_text().splitlines() if line.strip())
    clips = []
    for vid in video_ids:
        origin = root / vid / "origin"
        if not origin.is_dir():
            raise DataError(f"frame directory does not exist: {origin}")
        mask_dir = root / vid / "mask"
        frame_paths = sorted(origin.glob("*.png"))
        if not frame_paths:
            raise DataError(f"no frames found in {origin}")
        mask_paths = []
        for fp in frame_paths:
            mp = mask_dir / fp.name
            mask_paths.append(mp if mp.is_file() else None)
        clips.append(ClipDescriptor(clip_id=vid, frame_paths=frame_paths, mask_paths=mask_paths))
    return clips


def export_vspw_layout(clips, out_root, split: str = "train") -> None:
    """Write clips as PNG frames/masks in the VSPW directory layout."""
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_root}: {exc}") from exc

    ids = []
    for clip in clips:
        clip = clip.load() if isinstance(clip, ClipDescriptor) else clip
        origin = out_root / clip.clip_id / "origin"
        mask = out_root / clip.clip_id / "mask"
        origin.mkdir(parents=True, exist_ok=True)
        mask.mkdir(parents=True, exist_ok=True)
        for i in range(len(clip)):
            frame, label = clip.frame(i)
            rgb = np.clip(np.round(frame.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(origin / f"{i:05d}.png")
            Image.fromarray(label.astype(np.uint8), mode="L").save(mask / f"{i:05d}.png")
        ids.append(clip.clip_id)
    (out_root / f"{split}.txt").write_text("".join(f"{i}\n" for i in sorted(ids)))
