import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointsup.errors import ParameterError
from pointsup.gradcheck import central_difference, relative_error
from pointsup.losses import (
    ALPHA1,
    ALPHA2,
    compose_phase1,
    compose_phase2,
    compose_total,
    focal_loss,
    focal_loss_with_logits,
    iou_loss,
    iou_loss_batch,
    jitter_targets,
    jittering_iou_loss,
    jittering_iou_loss_batch,
)


class TestFocal:
    def test_perfect_prediction(self):
        assert focal_loss(1.0, 1.0).value == pytest.approx(0.0, abs=1e-12)

    def test_reduces_to_cross_entropy(self):
        p = np.array([0.1, 0.4, 0.8, 0.95])
        t = np.array([1.0, 0.0, 1.0, 0.0])
        ce = -np.sum(t * np.log(p) + (1 - t) * np.log(1 - p))
        np.testing.assert_allclose(focal_loss(p, t, alpha=None, gamma=0.0).value, ce, atol=1e-12)

    def test_alpha_weighting(self):
        v = focal_loss(0.5, 1.0).value
        np.testing.assert_allclose(v, 0.25 * 0.25 * np.log(2), rtol=1e-12)

    def test_logit_gradient(self):
        rng = np.random.default_rng(0)
        z = rng.normal(0, 2, 10)
        t = (rng.random(10) > 0.5).astype(float)
        g = focal_loss_with_logits(z, t).grad
        num = central_difference(lambda x: focal_loss_with_logits(x, t).value, z, 1e-6)
        assert relative_error(g, num) < 1e-6


class TestIoULoss:
    def test_identity_and_disjoint(self):
        box = np.array([1.0, 2.0, 3.0, 4.0])
        assert iou_loss(box, box).value == 0.0
        far = iou_loss(box, np.array([100.0, 100.0, 1.0, 1.0]))
        assert far.value == 1.0
        np.testing.assert_array_equal(far.grad, 0.0)

    def test_rotated_gradient_finite(self):
        pred = np.array([0.5, 0.2, 4.0, 3.0, 0.3])
        target = np.array([0.0, 0.0, 4.0, 3.0, 0.1])
        out = iou_loss(pred, target)
        assert np.all(np.isfinite(out.grad)) and np.linalg.norm(out.grad) > 0


class TestJitter:
    def test_r_zero_copies(self):
        gt = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(jitter_targets(gt, 0.0), np.tile(gt, (5, 1)))

    def test_sizes(self):
        out = jitter_targets(np.array([0.0, 0.0, 10.0, 10.0]), 0.2)
        np.testing.assert_allclose(out[1:, 2:], [[8, 8], [8, 12], [12, 8], [12, 12]])
        np.testing.assert_array_equal(out[:, :2], 0.0)

    def test_keeps_angle(self):
        out = jitter_targets(np.array([0.0, 0.0, 10.0, 10.0, 0.4]), 0.2)
        np.testing.assert_array_equal(out[:, 4], 0.4)

    @pytest.mark.parametrize("r", [-0.1, 1.0])
    def test_bad_ratio(self, r):
        with pytest.raises(ParameterError):
            jitter_targets(np.array([0.0, 0.0, 1.0, 1.0]), r)

    def test_exact_prediction_scores_zero(self):
        # the unperturbed target is one of the five, so the minimum term vanishes
        gt = np.array([0.0, 0.0, 10.0, 10.0])
        assert jittering_iou_loss(gt, gt, 0.2).value == 0.0

    def test_brute_force_minimum(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            gt = np.array([0, 0, *rng.uniform(4, 10, 2)])
            pred = gt + rng.normal(0, 1, 4)
            pred[2:] = np.abs(pred[2:]) + 1
            brute = iou_loss(pred, gt).value + min(iou_loss(pred, t).value for t in jitter_targets(gt, 0.3))
            np.testing.assert_allclose(jittering_iou_loss(pred, gt, 0.3).value, brute, atol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(-20, 20), st.floats(-20, 20), st.floats(1, 20), st.floats(1, 20),
        st.floats(-20, 20), st.floats(-20, 20), st.floats(1, 20), st.floats(1, 20),
        st.floats(-50, 50), st.floats(-50, 50),
    )
    def test_properties(self, px, py, pw, ph, gx, gy, gw, gh, tx, ty):
        pred = np.array([px, py, pw, ph])
        gt = np.array([gx, gy, gw, gh])
        j0 = jittering_iou_loss(pred, gt, 0.0).value
        assert abs(j0 - 2 * iou_loss(pred, gt).value) <= 1e-12
        j = jittering_iou_loss(pred, gt, 0.2).value
        assert j >= iou_loss(pred, gt).value
        shift = np.array([tx, ty, 0.0, 0.0])
        np.testing.assert_allclose(jittering_iou_loss(pred + shift, gt + shift, 0.2).value, j, atol=1e-9)

    def test_batch_shape(self):
        pred = np.ones((3, 2, 4)) + np.arange(4)
        vals, grads = jittering_iou_loss_batch(pred, pred[0, 0], 0.2)
        assert vals.shape == (3, 2) and grads.shape == (3, 2, 4)
        vals, grads = iou_loss_batch(pred, pred)
        np.testing.assert_array_equal(vals, 0.0)


class TestCompositions:
    def test_constants(self):
        assert (ALPHA1, ALPHA2) == (0.01, 0.25)

    def test_values(self):
        assert compose_phase1(1, 1, 1) == pytest.approx(1.26)
        assert compose_phase2(1, 1, 1) == pytest.approx(1.26)
        assert compose_phase1(0, 0, 0) == 0 and compose_phase2(0, 0, 0) == 0
        assert compose_total(1, 2, 3) == 6 and compose_total(0, 0, 0) == 0

    def test_linear_and_identical(self):
        rng = np.random.default_rng(2)
        a, b = rng.random(3), rng.random(3)
        np.testing.assert_allclose(compose_phase1(*(a + b)), compose_phase1(*a) + compose_phase1(*b))
        assert compose_phase1(*a) == compose_phase2(*a)
