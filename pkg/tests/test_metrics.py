import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle_utils import confusion_matrix_loops, flip_rate_loops, iou_from_matrix_loops
from tbseg.errors import ConfigurationError, ContractViolationError, DataError
from tbseg.metrics import ConfusionMatrix, flip_rate


def make_cm(matrix):
    cm = ConfusionMatrix(len(matrix))
    cm.matrix = np.asarray(matrix, dtype=np.int64)
    return cm


class TestConfusionMatrix:
    def test_hand_case_two_classes(self):
        cm = ConfusionMatrix(2)
        cm.update(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 1]]))
        assert cm.matrix.tolist() == [[1, 1], [0, 2]]
        # class 0: tp=1, union=1+1-1... row 2, col 1 -> 1/(2+1-1)=0.5
        iou = cm.per_class_iou()
        assert iou[0] == pytest.approx(0.5)
        assert iou[1] == pytest.approx(2 / 3)

    def test_known_matrix_mean_iou(self):
        cm = make_cm([[3, 1], [2, 4]])
        # class 0: 3/(4+5-3)=0.5; class 1: 4/(6+5-4)=4/7
        assert cm.mean_iou() == pytest.approx((0.5 + 4 / 7) / 2)
        assert cm.mean_iou() == pytest.approx(0.5357142857142857)
        assert cm.pixel_accuracy() == pytest.approx(0.7)

    def test_absent_class_is_nan_and_excluded(self):
        cm = ConfusionMatrix(3)
        cm.update(np.array([0, 1, 1]), np.array([0, 1, 0]))
        iou = cm.per_class_iou()
        assert np.isnan(iou[2])
        assert cm.mean_iou() == pytest.approx((iou[0] + iou[1]) / 2)

    def test_update_order_invariance(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 4, size=(6, 5, 5))
        labels = rng.integers(0, 4, size=(6, 5, 5))
        whole = ConfusionMatrix(4)
        whole.update(preds, labels)
        pieces = ConfusionMatrix(4)
        for i in np.random.default_rng(1).permutation(6):
            pieces.update(preds[i], labels[i])
        assert np.array_equal(whole.matrix, pieces.matrix)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 3, size=(4, 6, 6))
        labels = rng.integers(0, 3, size=(4, 6, 6))
        labels[rng.random(labels.shape) < 0.2] = 255
        cm = ConfusionMatrix(3)
        cm.update(preds, labels)
        assert np.array_equal(cm.matrix, confusion_matrix_loops(labels, preds, 3, 255))

    def test_iou_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        matrix = rng.integers(0, 20, size=(4, 4))
        matrix[3, :] = 0
        matrix[:, 3] = 0
        cm = make_cm(matrix)
        want_per_class, want_mean = iou_from_matrix_loops(cm.matrix)
        got = cm.per_class_iou()
        for c in range(4):
            if want_per_class[c] is None:
                assert np.isnan(got[c])
            else:
                assert got[c] == pytest.approx(want_per_class[c], abs=1e-12)
        assert cm.mean_iou() == pytest.approx(want_mean, abs=1e-12)

    def test_ignore_index_filtered(self):
        cm = ConfusionMatrix(2)
        cm.update(np.array([0, 1, 0]), np.array([0, 255, 255]))
        assert cm.matrix.sum() == 1

    def test_merge_is_elementwise_sum(self):
        a = make_cm([[1, 2], [3, 4]])
        b = make_cm([[10, 0], [0, 10]])
        merged = a.merge(b)
        assert merged.matrix.tolist() == [[11, 2], [3, 14]]
        # inputs untouched
        assert a.matrix.tolist() == [[1, 2], [3, 4]]

    def test_merge_equivalent_to_joint_update(self):
        rng = np.random.default_rng(4)
        preds = rng.integers(0, 3, size=(8, 4, 4))
        labels = rng.integers(0, 3, size=(8, 4, 4))
        joint = ConfusionMatrix(3)
        joint.update(preds, labels)
        a, b = ConfusionMatrix(3), ConfusionMatrix(3)
        a.update(preds[:3], labels[:3])
        b.update(preds[3:], labels[3:])
        assert np.array_equal(a.merge(b).matrix, joint.matrix)

    def test_merge_size_mismatch_is_contract_violation(self):
        with pytest.raises(ContractViolationError, match="merge"):
            ConfusionMatrix(2).merge(ConfusionMatrix(3))

    def test_shape_mismatch_is_contract_violation(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ContractViolationError):
            cm.update(np.zeros((2, 3), dtype=int), np.zeros((3, 2), dtype=int))

    def test_out_of_range_values_are_data_errors(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(DataError, match="predictions"):
            cm.update(np.array([0, 2]), np.array([0, 1]))
        with pytest.raises(DataError, match="labels"):
            cm.update(np.array([0, 1]), np.array([0, 7]))

    def test_float_input_rejected(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ConfigurationError, match="integer"):
            cm.update(np.zeros((2, 2)), np.zeros((2, 2), dtype=int))

    def test_empty_matrix_metrics_are_data_errors(self):
        cm = ConfusionMatrix(3)
        with pytest.raises(DataError):
            cm.mean_iou()
        with pytest.raises(DataError):
            cm.pixel_accuracy()

    def test_torch_tensors_accepted(self):
        cm = ConfusionMatrix(2)
        cm.update(torch.tensor([0, 1]), torch.tensor([0, 1]))
        assert cm.pixel_accuracy() == 1.0

    @given(seed=st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_iou_always_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        cm = make_cm(rng.integers(0, 10, size=(3, 3)))
        iou = cm.per_class_iou()
        for v in iou:
            assert np.isnan(v) or 0.0 <= v <= 1.0


class TestFlipRate:
    def test_hand_case(self):
        preds = np.array([
            [[0, 0], [1, 1]],
            [[0, 1], [1, 1]],   # 1 of 4 pixels changed
            [[0, 1], [0, 0]],   # 2 of 4 pixels changed
        ])
        assert flip_rate(preds) == pytest.approx(3 / 8)

    def test_constant_predictions_never_flip(self):
        preds = np.zeros((5, 3, 3), dtype=int)
        assert flip_rate(preds) == 0.0

    def test_alternating_predictions_always_flip(self):
        preds = np.stack([np.full((2, 2), t % 2) for t in range(6)])
        assert flip_rate(preds) == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        preds = rng.integers(0, 3, size=(7, 6, 5))
        assert flip_rate(preds) == pytest.approx(flip_rate_loops(preds), abs=1e-12)

    def test_needs_at_least_two_frames(self):
        with pytest.raises(ConfigurationError):
            flip_rate(np.zeros((1, 4, 4), dtype=int))
        with pytest.raises(ConfigurationError):
            flip_rate(np.zeros((4, 4), dtype=int))
