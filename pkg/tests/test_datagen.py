import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbseg import DataError, DatasetSpec, FrameClip, generate_clip
from tbseg.datagen import (IGNORE_INDEX, apply_crop_flip, class_palette, crop_and_flip,
                           draw_crop_flip_params, export_vspw_layout, load_vspw_dir)
from tbseg.errors import ConfigurationError


def small_spec(**kw):
    base = dict(num_clips=3, frames_per_clip=10, height=40, width=48, num_classes=4, seed=7)
    base.update(kw)
    return DatasetSpec(**base)


class TestGenerateClip:
    def test_shapes_dtypes_ranges(self):
        clip = generate_clip(small_spec(), 0)
        assert len(clip) == 10
        for frame, label in zip(clip.frames, clip.labels):
            assert frame.shape == (3, 40, 48) and frame.dtype == np.float32
            assert label.shape == (40, 48)
            assert frame.min() >= 0.0 and frame.max() <= 1.0
            assert set(np.unique(label)) <= {0, 1, 2, 3}

    def test_deterministic(self):
        a = generate_clip(small_spec(), 1)
        b = generate_clip(small_spec(), 1)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa, fb)
        for la, lb in zip(a.labels, b.labels):
            assert np.array_equal(la, lb)

    def test_clips_differ(self):
        a = generate_clip(small_spec(), 0)
        b = generate_clip(small_spec(), 1)
        assert not np.array_equal(a.labels[0], b.labels[0])

    def test_every_class_appears(self):
        clip = generate_clip(small_spec(), 0)
        seen = set()
        for label in clip.labels:
            seen |= set(np.unique(label).tolist())
        assert seen == {0, 1, 2, 3}

    def test_shapes_move_between_frames(self):
        clip = generate_clip(small_spec(motion_speed=3.0), 0)
        assert not np.array_equal(clip.labels[0], clip.labels[5])
        # motion is a translation: per-class pixel count is roughly conserved
        # (shape overlap can hide some pixels, hence the loose bound)
        for cls in range(1, 4):
            c0 = int((clip.labels[0] == cls).sum())
            c5 = int((clip.labels[5] == cls).sum())
            assert c0 > 0 and c5 > 0
            assert abs(c0 - c5) <= max(c0, c5) * 0.8

    def test_motion_speed_zero_freezes_labels(self):
        clip = generate_clip(small_spec(motion_speed=0.0), 0)
        for label in clip.labels[1:]:
            assert np.array_equal(label, clip.labels[0])

    def test_clip_index_out_of_range(self):
        with pytest.raises(ConfigurationError):
            generate_clip(small_spec(), 3)

    @pytest.mark.parametrize("bad", [
        dict(num_clips=0), dict(num_classes=1), dict(frames_per_clip=9),
        dict(height=31), dict(width=0),
    ])
    def test_spec_validation(self, bad):
        with pytest.raises(ConfigurationError):
            small_spec(**bad).validate()


def test_palette_distinct_colors():
    pal = class_palette(6)
    assert pal.shape == (6, 3)
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.abs(pal[i] - pal[j]).max() > 0.1


def test_clip_validate_rejects_bad_labels():
    clip = generate_clip(small_spec(), 0)
    clip.labels[3] = clip.labels[3].copy()
    clip.labels[3][0, 0] = 9
    with pytest.raises(DataError, match="outside"):
        clip.validate(num_classes=4)


def test_clip_validate_rejects_mismatched_sizes():
    clip = generate_clip(small_spec(), 0)
    clip.labels[2] = clip.labels[2][:-1]
    with pytest.raises(DataError):
        clip.validate()


class TestCropFlip:
    @given(h=st.integers(8, 40), w=st.integers(8, 40),
           ch=st.integers(4, 48), cw=st.integers(4, 48),
           seed=st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_output_size_and_alignment(self, h, w, ch, cw, seed):
        rng = np.random.default_rng(seed)
        frame = rng.random((3, h, w), dtype=np.float32)
        label = rng.integers(0, 3, (h, w)).astype(np.uint8)
        out_f, out_l = crop_and_flip(frame, label, ch, cw, rng)
        assert out_f.shape == (3, ch, cw)
        assert out_l.shape == (ch, cw)
        # padded label pixels are ignore, padded frame pixels are zero
        pad_mask = out_l == IGNORE_INDEX
        if pad_mask.any():
            assert np.all(out_f[:, pad_mask] == 0.0)

    def test_same_params_same_transform(self, rng):
        frame = rng.random((3, 20, 20), dtype=np.float32)
        label = rng.integers(0, 3, (20, 20)).astype(np.uint8)
        params = draw_crop_flip_params(20, 20, 12, 12, rng)
        f1, l1 = apply_crop_flip(frame, label, params)
        f2, l2 = apply_crop_flip(frame, label, params)
        assert np.array_equal(f1, f2) and np.array_equal(l1, l2)

    def test_flip_is_horizontal_mirror(self, rng):
        from tbseg.datagen import CropFlipParams

        frame = rng.random((3, 10, 10), dtype=np.float32)
        label = rng.integers(0, 3, (10, 10)).astype(np.uint8)
        plain = CropFlipParams(top=0, left=0, crop_h=10, crop_w=10, flip=False)
        flipped = CropFlipParams(top=0, left=0, crop_h=10, crop_w=10, flip=True)
        f0, l0 = apply_crop_flip(frame, label, plain)
        f1, l1 = apply_crop_flip(frame, label, flipped)
        assert np.array_equal(f1, f0[:, :, ::-1])
        assert np.array_equal(l1, l0[:, ::-1])

    def test_label_none_supported(self, rng):
        frame = rng.random((3, 16, 16), dtype=np.float32)
        params = draw_crop_flip_params(16, 16, 20, 20, rng)
        out_f, out_l = apply_crop_flip(frame, None, params)
        assert out_f.shape == (3, 20, 20) and out_l is None

    def test_crop_content_matches_source(self, rng):
        from tbseg.datagen import CropFlipParams

        frame = np.arange(8 * 9, dtype=np.float32).reshape(1, 8, 9).repeat(3, axis=0)
        label = np.arange(8 * 9, dtype=np.uint8).reshape(8, 9) % 4
        params = CropFlipParams(top=2, left=3, crop_h=4, crop_w=5, flip=False)
        out_f, out_l = apply_crop_flip(frame, label, params)
        assert np.array_equal(out_f, frame[:, 2:6, 3:8])
        assert np.array_equal(out_l, label[2:6, 3:8])


class TestVspwLayout:
    def test_export_load_roundtrip(self, tmp_path):
        spec = small_spec(num_clips=2)
        clips = [generate_clip(spec, i) for i in range(2)]
        export_vspw_layout(clips, tmp_path, split="train")

        assert (tmp_path / "train.txt").is_file()
        assert (tmp_path / "clip_0000" / "origin" / "00000.png").is_file()
        assert (tmp_path / "clip_0000" / "mask" / "00000.png").is_file()

        loaded = [d.load() for d in load_vspw_dir(tmp_path, "train")]
        assert [c.clip_id for c in loaded] == ["clip_0000", "clip_0001"]
        for orig, back in zip(clips, loaded):
            assert len(back) == len(orig)
            for lo, lb in zip(orig.labels, back.labels):
                assert np.array_equal(lo, lb)  # labels survive exactly
            for fo, fb in zip(orig.frames, back.frames):
                # frames go through 8-bit quantization
                assert np.abs(fo - fb).max() <= (0.5 / 255) + 1e-6

    def test_missing_root(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_vspw_dir(tmp_path / "nope", "train")

    def test_missing_split_file(self, tmp_path):
        with pytest.raises(DataError, match="split"):
            load_vspw_dir(tmp_path, "val")

    def test_missing_mask_becomes_ignore(self, tmp_path):
        clips = [generate_clip(small_spec(num_clips=1), 0)]
        export_vspw_layout(clips, tmp_path, split="train")
        (tmp_path / "clip_0000" / "mask" / "00003.png").unlink()
        clip = load_vspw_dir(tmp_path, "train")[0].load()
        assert np.all(clip.labels[3] == IGNORE_INDEX)
        assert not np.all(clip.labels[2] == IGNORE_INDEX)

    def test_mask_size_mismatch_names_file(self, tmp_path):
        from PIL import Image

        clips = [generate_clip(small_spec(num_clips=1), 0)]
        export_vspw_layout(clips, tmp_path, split="train")
        bad = tmp_path / "clip_0000" / "mask" / "00002.png"
        Image.fromarray(np.zeros((5, 5), dtype=np.uint8), mode="L").save(bad)
        with pytest.raises(DataError, match="00002.png"):
            load_vspw_dir(tmp_path, "train")[0].load()
