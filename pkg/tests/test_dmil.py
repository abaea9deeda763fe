import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointsup.errors import ParameterError
from pointsup.dmil import (
    CONSTRUCT_GRID,
    EXTEND_GRID,
    JitterGrid,
    construct_bag,
    dmil_cls_loss,
    dmil_reg_loss,
    extend_bag,
    fusion_weights,
    refine_bag,
    sample_negatives,
    score_bag,
    select_and_fuse,
)
from pointsup.geometry import pairwise_iou_h
from pointsup.losses import jittering_iou_loss


def brute_force_scores(cls, ins):
    """Loop-based reference for the bag score algebra."""
    s_hat = np.zeros(cls.shape[:-2] + cls.shape[-1:])
    for idx in np.ndindex(*cls.shape[:-2]):
        for c in range(cls.shape[-1]):
            e = np.exp(ins[idx][:, c])
            soft = e / e.sum()
            s_hat[idx + (c,)] = sum(1 / (1 + np.exp(-cls[idx][u, c])) * soft[u] for u in range(cls.shape[-2]))
    return s_hat


class TestBags:
    def test_sizes(self):
        bag = construct_bag(np.array([10.0, 10.0, 8.0, 6.0]))
        assert bag.shape == (CONSTRUCT_GRID.size, 4) == (45, 4)
        ext = extend_bag(bag)
        assert ext.shape == (45, EXTEND_GRID.size, 4)

    def test_identity_grid(self):
        seed = np.array([[1.0, 2.0, 3.0, 4.0, 0.2]])
        np.testing.assert_array_equal(construct_bag(seed, JitterGrid())[:, 0], seed)

    def test_offsets_scale_with_seed(self):
        bag = construct_bag(np.array([0.0, 0.0, 10.0, 20.0]), JitterGrid((2.0,), (0.5,)))
        np.testing.assert_allclose(bag, [[5.0, 10.0, 20.0, 40.0]])

    def test_refine_shape_check(self):
        with pytest.raises(ParameterError):
            refine_bag(np.ones((2, 3, 4)), np.zeros((2, 4)))


class TestScoring:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_softmax_and_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        cls = rng.normal(0, 3, (2, 3, 4, 2))
        ins = rng.normal(0, 3, (2, 3, 4, 2))
        sc = score_bag(cls, ins)
        np.testing.assert_allclose(sc.s_ins.sum(axis=-2), 1.0, atol=1e-9)
        assert np.all((sc.s_hat >= 0) & (sc.s_hat <= 1))
        np.testing.assert_allclose(sc.s_hat, brute_force_scores(cls, ins), atol=1e-12)

    def test_extreme_logits_stable(self):
        sc = score_bag(np.full((1, 2, 3, 1), 50.0), np.array([[[[800.0], [0.0], [-800.0]]] * 2]))
        assert np.all(np.isfinite(sc.s_hat))
        np.testing.assert_allclose(sc.s_hat, 1.0)


class TestFusion:
    def test_beta_one_returns_seed(self):
        rng = np.random.default_rng(0)
        seed = np.array([3.3, 1.7, 9.1, 4.4])
        out = select_and_fuse(rng.normal(size=(5, 4, 4)), rng.random((5, 4, 2)), seed, 1, 3, 1.0)
        assert np.array_equal(out, seed)

    def test_topk_selection(self):
        boxes = np.array([[0, 0, 1, 1], [10, 0, 1, 1], [20, 0, 1, 1]], dtype=float)
        scores = np.array([[0.1], [0.6], [0.2]])
        out = select_and_fuse(boxes, scores, np.zeros(4), 0, 2, 0.0)
        np.testing.assert_allclose(out, [(10 * 0.6 + 20 * 0.2) / 0.8, 0, 1, 1])

    def test_weights(self):
        w = fusion_weights(np.random.default_rng(1).random(7))
        assert abs(w.sum() - 1) <= 1e-9
        np.testing.assert_array_equal(fusion_weights(np.zeros(4)), 0.25)

    def test_validation(self):
        with pytest.raises(ParameterError):
            select_and_fuse(np.zeros((2, 4)), np.zeros((2, 1)), np.zeros(4), 0, 3, 0.5)
        with pytest.raises(ParameterError):
            select_and_fuse(np.zeros((2, 4)), np.zeros((2, 1)), np.zeros(4), 0, 1, 1.5)


class TestLosses:
    def test_reg_loss_matches_elementwise(self):
        rng = np.random.default_rng(2)
        ext = extend_bag(construct_bag(np.array([0.0, 0.0, 10.0, 8.0]), JitterGrid((1.0,), (0.0, 0.1))), JitterGrid((1.0, 1.2)))
        deltas = rng.normal(0, 0.1, ext.shape)
        target = np.array([0.5, 0.0, 9.0, 9.0])
        value, _ = dmil_reg_loss(deltas, ext, target)
        refined = refine_bag(ext, deltas).reshape(-1, 4)
        ref = np.mean([jittering_iou_loss(b, target, 0.2).value for b in refined])
        np.testing.assert_allclose(value, ref, atol=1e-14)

    def test_cls_loss_no_negatives(self):
        rng = np.random.default_rng(3)
        value, _, _, d_neg = dmil_cls_loss(rng.normal(size=(1, 2, 3, 2)), rng.normal(size=(1, 2, 3, 2)), np.eye(2)[[0, 0]][None], np.zeros((0, 2)))
        assert value > 0 and d_neg.shape == (0, 2)


class TestNegatives:
    def test_low_overlap(self):
        seeds = np.array([[32.0, 32.0, 16.0, 16.0]])
        neg = sample_negatives(seeds, 128, 128, 50, np.random.default_rng(4))
        assert len(neg) == 50
        assert np.all(pairwise_iou_h(neg, seeds) < 0.1)
        assert np.all(neg[:, 0] - neg[:, 2] / 2 >= 0) and np.all(neg[:, 0] + neg[:, 2] / 2 <= 128)
