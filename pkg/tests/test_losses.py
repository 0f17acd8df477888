import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracle_utils import cross_entropy_loops, ohem_keep_loops
from tbseg.errors import ConfigurationError, DataError
from tbseg.losses import OhemConfig, cross_entropy_loss, ohem_cross_entropy, ohem_select


def random_batch(rng, b=2, k=4, h=6, w=5, ignore_frac=0.2):
    logits = torch.from_numpy(rng.normal(size=(b, k, h, w)).astype(np.float32))
    labels = rng.integers(0, k, size=(b, h, w))
    labels[rng.random(labels.shape) < ignore_frac] = 255
    return logits, torch.from_numpy(labels.astype(np.int64))


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        for k in (2, 3, 4, 7):
            logits = torch.zeros(1, k, 4, 4)
            labels = torch.randint(0, k, (1, 4, 4))
            loss = cross_entropy_loss(logits, labels)
            assert abs(float(loss) - math.log(k)) < 1e-6

    def test_shift_invariance(self):
        # adding a per-pixel constant to every class logit changes nothing
        rng = np.random.default_rng(0)
        logits, labels = random_batch(rng)
        shifted = logits + 100.0
        a = float(cross_entropy_loss(logits, labels))
        b = float(cross_entropy_loss(shifted, labels))
        assert abs(a - b) < 1e-4  # float32 headroom; exact math is invariant

    def test_hand_computed_two_pixel_case(self):
        # pixel 1: logits (1, 0), label 0; pixel 2: logits (0, 2), label 1
        logits = torch.tensor([[[[1.0, 0.0]], [[0.0, 2.0]]]])  # [1,2,1,2]
        labels = torch.tensor([[[0, 1]]])
        want = 0.5 * (math.log(1 + math.exp(-1)) + math.log(1 + math.exp(-2)))
        assert abs(float(cross_entropy_loss(logits, labels)) - want) < 1e-6

    def test_matches_float64_loop_oracle(self):
        rng = np.random.default_rng(1)
        logits, labels = random_batch(rng, b=2, k=5, h=7, w=6)
        got = float(cross_entropy_loss(logits, labels))
        want = cross_entropy_loops(logits.numpy(), labels.numpy(), 255)
        assert abs(got - want) < 1e-5

    def test_ignored_pixels_do_not_contribute(self):
        logits = torch.randn(1, 3, 2, 2)
        labels = torch.tensor([[[0, 255], [255, 2]]])
        # recompute using only the two valid pixels
        sub_logits = torch.stack([logits[0, :, 0, 0], logits[0, :, 1, 1]])
        lp = torch.log_softmax(sub_logits, dim=1)
        want = -(lp[0, 0] + lp[1, 2]) / 2
        assert torch.allclose(cross_entropy_loss(logits, labels), want, atol=1e-7)

    def test_all_ignored_is_a_data_error(self):
        logits = torch.randn(1, 3, 2, 2)
        labels = torch.full((1, 2, 2), 255, dtype=torch.int64)
        with pytest.raises(DataError, match="no valid pixels"):
            cross_entropy_loss(logits, labels)

    def test_out_of_range_label_is_a_data_error(self):
        logits = torch.randn(1, 3, 2, 2)
        labels = torch.tensor([[[0, 1], [2, 3]]])
        with pytest.raises(DataError, match="labels must be"):
            cross_entropy_loss(logits, labels)

    def test_shape_validation(self):
        with pytest.raises(ConfigurationError):
            cross_entropy_loss(torch.randn(3, 2, 2), torch.zeros(1, 2, 2, dtype=torch.int64))
        with pytest.raises(ConfigurationError):
            cross_entropy_loss(torch.randn(1, 3, 2, 2), torch.zeros(1, 2, 3, dtype=torch.int64))


class TestOhemSelect:
    @given(n=st.integers(1, 60), thresh=st.floats(0.05, 0.95), min_kept=st.integers(1, 80),
           seed=st.integers(0, 999))
    @settings(max_examples=60, deadline=None)
    def test_matches_loop_oracle(self, n, thresh, min_kept, seed):
        rng = np.random.default_rng(seed)
        p = torch.from_numpy(rng.random(n).astype(np.float32))
        got = ohem_select(p, thresh, min_kept).numpy()
        want = ohem_keep_loops(p.numpy(), thresh, min_kept)
        assert np.array_equal(got, want)

    def test_all_easy_keeps_exactly_min_kept(self):
        p = torch.linspace(0.9, 0.99, steps=20)
        keep = ohem_select(p, 0.7, 5)
        assert int(keep.sum()) == 5
        # the five lowest probabilities are the ones kept
        assert torch.equal(keep, p <= p.sort().values[4])

    def test_all_hard_keeps_everything(self):
        p = torch.full((15,), 0.1)
        assert int(ohem_select(p, 0.7, 5).sum()) == 15

    def test_fewer_pixels_than_min_kept_keeps_all(self):
        p = torch.full((3,), 0.99)
        assert int(ohem_select(p, 0.7, 100).sum()) == 3

    def test_ties_resolve_by_position(self):
        p = torch.tensor([0.9, 0.9, 0.9, 0.9])
        keep = ohem_select(p, 0.5, 2)
        assert keep.tolist() == [True, True, False, False]

    @given(seed=st.integers(0, 200))
    @settings(max_examples=30, deadline=None)
    def test_kept_count_monotone_in_min_kept(self, seed):
        rng = np.random.default_rng(seed)
        p = torch.from_numpy(rng.random(30).astype(np.float32))
        counts = [int(ohem_select(p, 0.5, m).sum()) for m in range(1, 31)]
        assert counts == sorted(counts)

    def test_requires_1d(self):
        with pytest.raises(ConfigurationError):
            ohem_select(torch.rand(2, 3), 0.5, 1)


class TestOhemCrossEntropy:
    def test_equals_ce_when_everything_is_kept(self):
        rng = np.random.default_rng(2)
        logits, labels = random_batch(rng, b=2, k=4, h=8, w=8)
        ce = float(cross_entropy_loss(logits, labels))
        mined = float(ohem_cross_entropy(logits, labels,
                                         config=OhemConfig(0.999999, 10 ** 6)))
        assert abs(ce - mined) < 1e-9

    def test_hard_pixels_raise_the_loss(self):
        # mining keeps the worst pixels, so the mined mean is >= the full mean
        rng = np.random.default_rng(3)
        logits, labels = random_batch(rng, b=2, k=4, h=8, w=8, ignore_frac=0.0)
        ce = float(cross_entropy_loss(logits, labels))
        mined = float(ohem_cross_entropy(logits, labels, config=OhemConfig(0.7, 8)))
        assert mined >= ce - 1e-7

    def test_non_kept_pixels_get_zero_gradient(self):
        torch.manual_seed(0)
        logits = torch.randn(1, 3, 4, 4, requires_grad=True)
        labels = torch.randint(0, 3, (1, 4, 4))
        loss = ohem_cross_entropy(logits, labels, config=OhemConfig(0.5, 2))
        loss.backward()
        with torch.no_grad():
            p_true = torch.softmax(logits, dim=1).gather(
                1, labels.unsqueeze(1)).squeeze(1)
            kept = ohem_select(p_true.reshape(-1), 0.5, 2).reshape(1, 4, 4)
        grad_by_pixel = logits.grad.abs().sum(dim=1)
        assert torch.all(grad_by_pixel[~kept] == 0)
        assert torch.all(grad_by_pixel[kept] > 0)

    def test_selection_respects_ignore_index(self):
        logits = torch.randn(1, 3, 2, 2)
        labels = torch.tensor([[[255, 0], [1, 255]]])
        # only two valid pixels exist; min_kept larger than that must not crash
        loss = ohem_cross_entropy(logits, labels, config=OhemConfig(0.7, 100))
        sub_logits = torch.stack([logits[0, :, 0, 1], logits[0, :, 1, 0]])
        lp = torch.log_softmax(sub_logits, dim=1)
        want = -(lp[0, 0] + lp[1, 1]) / 2
        assert torch.allclose(loss, want, atol=1e-7)

    def test_config_validation(self):
        logits = torch.randn(1, 2, 2, 2)
        labels = torch.zeros(1, 2, 2, dtype=torch.int64)
        with pytest.raises(ConfigurationError):
            ohem_cross_entropy(logits, labels, config=OhemConfig(prob_threshold=1.5))
        with pytest.raises(ConfigurationError):
            ohem_cross_entropy(logits, labels, config=OhemConfig(min_kept=0))

    @given(data=hnp.arrays(np.float32, (1, 3, 4, 4),
                           elements=st.floats(-5, 5, width=32)),
           seed=st.integers(0, 99))
    @settings(max_examples=40, deadline=None)
    def test_mined_loss_always_finite(self, data, seed):
        rng = np.random.default_rng(seed)
        labels = torch.from_numpy(rng.integers(0, 3, size=(1, 4, 4)))
        loss = ohem_cross_entropy(torch.from_numpy(data), labels,
                                  config=OhemConfig(0.7, 4))
        assert bool(torch.isfinite(loss))
