import numpy as np
import pytest
from sklearn.base import clone

from tbseg import TemporalBilateralSegmenter
from tbseg.errors import ConfigurationError, DataError


def tiny_segmenter(**overrides):
    kw = dict(num_classes=4, embed_dim=8, stage1_steps=2, stage2_steps=1,
              batch_size=2, crop_h=32, crop_w=32, ohem_min_kept=64, seed=0)
    kw.update(overrides)
    return TemporalBilateralSegmenter(**kw)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = tiny_segmenter()
        params = est.get_params()
        assert params["num_classes"] == 4
        assert params["stage1_steps"] == 2
        est.set_params(stage1_steps=5)
        assert est.get_params()["stage1_steps"] == 5

    def test_clone_copies_hyperparameters_only(self, toy_clips):
        est = tiny_segmenter().fit(list(toy_clips))
        copy = clone(est)
        assert copy.get_params() == est.get_params()
        assert not hasattr(copy, "model_")

    def test_unfitted_raises(self, toy_clips):
        est = tiny_segmenter()
        with pytest.raises(ConfigurationError, match="not fitted"):
            est.predict(list(toy_clips))
        with pytest.raises(ConfigurationError, match="not fitted"):
            est.score(list(toy_clips))


@pytest.fixture(scope="module")
def fitted(toy_clips):
    return tiny_segmenter().fit(list(toy_clips))


class TestFitPredictScore:
    def test_fit_returns_self_and_sets_state(self, fitted, toy_clips):
        assert hasattr(fitted, "model_")
        assert len(fitted.history_) == 3
        assert list(fitted.classes_) == [0, 1, 2, 3]

    def test_predict_shapes_and_values(self, fitted, toy_clips):
        preds = fitted.predict(list(toy_clips))
        assert len(preds) == len(toy_clips)
        first = preds[0]
        assert first.shape == (len(toy_clips[0]), 64, 64)
        assert first.dtype.kind in "iu"
        assert first.min() >= 0 and first.max() < 4

    def test_score_is_a_valid_miou(self, fitted, toy_clips):
        score = fitted.score(list(toy_clips))
        assert 0.0 <= score <= 1.0

    def test_single_clip_without_list(self, fitted, toy_clips):
        preds = fitted.predict(toy_clips[0])
        assert len(preds) == 1

    def test_accepts_frames_labels_pairs(self, fitted, toy_clips):
        clip = toy_clips[0]
        pairs = [(clip.frames, clip.labels)]
        preds = fitted.predict(pairs)
        assert preds[0].shape == (len(clip), 64, 64)

    def test_fit_is_reproducible(self, toy_clips):
        a = tiny_segmenter().fit(list(toy_clips))
        b = tiny_segmenter().fit(list(toy_clips))
        assert [r["loss"] for r in a.history_] == [r["loss"] for r in b.history_]


class TestVariants:
    def test_single_stage_recipe(self, toy_clips):
        est = tiny_segmenter(stage2_steps=0).fit(list(toy_clips))
        assert {r["stage"] for r in est.history_} == {"stage1"}

    def test_temporal_variant(self, toy_clips):
        est = tiny_segmenter(temporal=True, temporal_offsets=(1, 2)).fit(
            list(toy_clips))
        assert est.model_.config.temporal is True
        preds = est.predict(toy_clips[0])
        assert preds[0].shape == (len(toy_clips[0]), 64, 64)


class TestInputValidation:
    def test_empty_input(self):
        with pytest.raises(DataError, match="non-empty"):
            tiny_segmenter().fit([])

    def test_garbage_clip(self):
        with pytest.raises(DataError, match="expected a FrameClip"):
            tiny_segmenter().fit([np.zeros((3, 4, 4))])
