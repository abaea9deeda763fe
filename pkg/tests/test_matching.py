import numpy as np
import pytest

from pointsup.errors import ParameterError
from pointsup.matching import Predictions, coarse_pseudo_boxes, cost_matrix, fuse_coarse, match_points, refine_pseudo


def make_preds(boxes, scores):
    boxes = np.asarray(boxes, dtype=float)
    return Predictions(boxes, np.asarray(scores, dtype=float), np.arange(len(boxes)))


class TestCost:
    def test_spatial_term(self):
        preds = make_preds([[0, 0, 4, 4], [10, 0, 4, 4]], [[0.9, 0.1], [0.9, 0.1]])
        cost = cost_matrix([[0.0, 0.0]], [0], preds)
        np.testing.assert_allclose(cost[0, 1] - cost[0, 0], 1.0)


class TestMatch:
    def test_two_stage(self):
        # five candidates at increasing distance; the far ones are confident
        boxes = [[d, 0, 4, 4] for d in (0.5, 1, 1.5, 2, 30)]
        scores = [[0.2, 0], [0.9, 0], [0.5, 0], [0.95, 0], [0.99, 0]]
        out = match_points([[0.0, 0.0]], [0], make_preds(boxes, scores), k1=4, k2=2)
        np.testing.assert_array_equal(out[0], [3, 1])

    def test_class_gating(self):
        preds = make_preds([[0, 0, 4, 4], [1, 0, 4, 4]], [[0.9, 0.1], [0.1, 0.9]])
        assert list(match_points([[0, 0]], [1], preds, k1=2, k2=1)[0]) == [1]
        assert list(match_points([[0, 0]], [1], preds, k1=2, k2=2, class_gating=False)[0]) == [1, 0]

    def test_unmatched_and_empty(self):
        preds = make_preds([[0, 0, 4, 4]], [[0.9, 0.1]])
        assert len(match_points([[0, 0]], [1], preds)[0]) == 0
        empty = make_preds(np.zeros((0, 4)), np.zeros((0, 2)))
        matched, boxes = coarse_pseudo_boxes([[0, 0]], [0], empty)
        assert matched.size == 0 and boxes.shape == (0, 4)

    def test_k_order(self):
        with pytest.raises(ParameterError):
            match_points([[0, 0]], [0], make_preds([[0, 0, 1, 1]], [[1.0]]), k1=2, k2=3)


class TestFuse:
    def test_weighted_mean(self):
        out = fuse_coarse([[0, 0, 4, 4], [2, 0, 8, 4]], [1.0, 3.0])
        np.testing.assert_allclose(out, [1.5, 0, 7, 4])

    def test_single_candidate_identity(self):
        box = np.array([1.5, 2.5, 3.0, 4.0])
        np.testing.assert_array_equal(fuse_coarse(box[None], [0.4]), box)

    def test_refine_beta_one(self):
        coarse = np.array([1.25, 2.5, 3.75, 5.0])
        rng = np.random.default_rng(0)
        out = refine_pseudo(coarse, rng.normal(size=(3, 2, 4)), rng.random((3, 2, 1)), 0, 1, 1.0)
        assert np.array_equal(out, coarse)
