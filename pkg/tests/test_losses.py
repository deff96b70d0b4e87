"""Loss tests: closed-form values, branch continuity, gradients, annealing."""

import math

import numpy as np
import pytest

from flowcast.autodiff import Tensor, backward, softmax_channels
from flowcast.errors import ConfigError, ShapeError
from flowcast.losses import LOG_EPS, LossWeights, default_weights, rgb_loss, seg_loss, total_loss
from flowcast.warp import VOID

from helpers import check_gradients, tensor64


def one_hot(labels, c):
    n, h, w = labels.shape
    out = np.zeros((n, c, h, w))
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


class TestSegLoss:
    def test_one_hot_correct_is_zero(self):
        gt = np.random.default_rng(0).integers(0, 4, (1, 5, 5)).astype(np.uint8)
        loss = seg_loss(tensor64(one_hot(gt, 4)), gt)
        assert loss.data == pytest.approx(0.0)

    def test_uniform_prediction_is_log_c(self):
        gt = np.zeros((1, 3, 3), dtype=np.uint8)
        pred = tensor64(np.full((1, 4, 3, 3), 0.25))
        assert seg_loss(pred, gt).data == pytest.approx(math.log(4.0))

    def test_zero_probability_clamped(self):
        gt = np.zeros((1, 1, 1), dtype=np.uint8)
        pred = tensor64(np.array([0.0, 1.0]).reshape(1, 2, 1, 1))
        assert seg_loss(pred, gt).data == pytest.approx(-math.log(LOG_EPS))

    def test_all_void_warns_and_is_zero(self):
        gt = np.full((1, 2, 2), VOID, dtype=np.uint8)
        with pytest.warns(RuntimeWarning):
            loss = seg_loss(tensor64(np.full((1, 3, 2, 2), 1 / 3)), gt)
        assert loss.data == 0.0

    def test_void_pixels_get_zero_gradient(self):
        gt = np.zeros((1, 2, 2), dtype=np.uint8)
        gt[0, 0, 0] = VOID
        pred = tensor64(np.full((1, 2, 2, 2), 0.5))
        backward(seg_loss(pred, gt))
        assert np.all(pred.grad[:, :, 0, 0] == 0.0)
        assert np.any(pred.grad[:, :, 1, 1] != 0.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_through_softmax(self, seed):
        rng = np.random.default_rng(seed)
        logits = tensor64(rng.standard_normal((2, 4, 3, 3)))
        gt = rng.integers(0, 4, (2, 3, 3)).astype(np.uint8)
        gt[0, 0, 0] = VOID
        check_gradients(lambda: seg_loss(softmax_channels(logits), gt), [logits])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            seg_loss(tensor64(np.zeros((1, 2, 3, 3))), np.zeros((1, 4, 4), dtype=np.uint8))

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            seg_loss(tensor64(np.full((1, 2, 1, 1), 0.5)), np.array([[[7]]], dtype=np.uint8))


class TestRgbLoss:
    def test_zero_difference(self):
        x = np.random.default_rng(0).random((1, 3, 4, 4))
        assert rgb_loss(tensor64(x), x).data == pytest.approx(0.0)

    @pytest.mark.parametrize("d,expected", [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-1.0, 0.5)])
    def test_single_element_values(self, d, expected):
        pred = tensor64(np.array(d).reshape(1, 1, 1, 1))
        gt = np.zeros((1, 1, 1, 1))
        assert rgb_loss(pred, gt).data == pytest.approx(expected)

    def test_branches_continuous_at_one(self):
        gt = np.zeros((1, 1, 1, 1))
        below = rgb_loss(tensor64(np.full((1, 1, 1, 1), 1.0 - 1e-9)), gt).data
        above = rgb_loss(tensor64(np.full((1, 1, 1, 1), 1.0 + 1e-9)), gt).data
        assert abs(float(below) - float(above)) < 1e-8

    def test_derivative_continuous_at_one(self):
        gt = np.zeros((1, 1, 1, 1))
        for v in (1.0 - 1e-7, 1.0 + 1e-7):
            pred = tensor64(np.full((1, 1, 1, 1), v))
            backward(rgb_loss(pred, gt))
            assert pred.grad[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_mixed_magnitudes(self, seed):
        rng = np.random.default_rng(seed)
        pred = tensor64(rng.uniform(-2.5, 2.5, (1, 3, 4, 4)))
        gt = rng.random((1, 3, 4, 4))
        check_gradients(lambda: rgb_loss(pred, gt), [pred])

    def test_literal_sum_quadratic_branch(self):
        pred = tensor64(np.array([0.1, -0.2]).reshape(1, 1, 1, 2))
        gt = np.zeros((1, 1, 1, 2))
        # summed distance 0.3 < 1: loss = 0.5 * 0.3^2
        assert rgb_loss(pred, gt, literal_sum=True).data == pytest.approx(0.045)

    def test_literal_sum_linear_branch(self):
        pred = tensor64(np.array([0.9, -0.8]).reshape(1, 1, 1, 2))
        gt = np.zeros((1, 1, 1, 2))
        assert rgb_loss(pred, gt, literal_sum=True).data == pytest.approx(1.7 - 0.5)

    def test_literal_sum_one_saturated_pixel_flips_branch(self):
        gt = np.zeros((1, 1, 1, 2))
        small = rgb_loss(tensor64(np.array([[0.1, 0.1]]).reshape(1, 1, 1, 2)), gt, literal_sum=True)
        big = rgb_loss(tensor64(np.array([[0.1, 1.5]]).reshape(1, 1, 1, 2)), gt, literal_sum=True)
        assert small.data == pytest.approx(0.5 * 0.04)
        assert big.data == pytest.approx(1.6 - 0.5)

    @pytest.mark.parametrize("scale_", [0.1, 2.0])
    def test_literal_sum_gradient(self, scale_):
        rng = np.random.default_rng(4)
        pred = tensor64(scale_ * rng.uniform(0.2, 0.8, (1, 1, 3, 3)))
        gt = np.zeros((1, 1, 3, 3))
        check_gradients(lambda: rgb_loss(pred, gt, literal_sum=True), [pred])


class TestTotalLoss:
    def test_equal_weights(self):
        w = LossWeights(1.0, 1.0)
        out = total_loss(tensor64(0.3), tensor64(0.2), w, 0)
        assert out.data == pytest.approx(0.5)

    def test_weighted_sum(self):
        w = LossWeights(1.0, 0.5)
        assert total_loss(tensor64(0.3), tensor64(0.2), w, 0).data == pytest.approx(0.4)

    def test_schedule_left_closed(self):
        w = LossWeights(1.0, 1.0, anneal_schedule=((10, 0.5), (20, 0.0)))
        assert w.lambda2_at(0) == 1.0
        assert w.lambda2_at(9) == 1.0
        assert w.lambda2_at(10) == 0.5
        assert w.lambda2_at(19) == 0.5
        assert w.lambda2_at(20) == 0.0
        assert w.lambda2_at(10_000) == 0.0

    def test_annealed_to_zero_kills_rgb_gradient(self):
        w = LossWeights(1.0, 1.0, anneal_schedule=((5, 0.0),))
        seg = tensor64(np.array(0.3))
        rgb = tensor64(np.array(0.2))
        backward(total_loss(seg, rgb, w, 7))
        assert rgb.grad == 0.0
        assert seg.grad == 1.0

    def test_default_schedule_reaches_zero(self):
        w = default_weights(1000)
        assert w.lambda2_at(0) == 1.0
        assert w.lambda2_at(250) == 0.5
        assert w.lambda2_at(500) == 0.1
        assert w.lambda2_at(750) == 0.0
        assert w.lambda2_at(999) == 0.0

    def test_invalid_schedules(self):
        with pytest.raises(ConfigError):
            LossWeights(1.0, 1.0, anneal_schedule=((10, 0.5), (10, 0.1)))
        with pytest.raises(ConfigError):
            LossWeights(1.0, 1.0, anneal_schedule=((10, 0.5), (20, 0.7)))
        with pytest.raises(ConfigError):
            LossWeights(-1.0, 1.0)
