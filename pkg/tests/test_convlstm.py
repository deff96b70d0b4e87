"""Recurrent aggregator tests: gate arithmetic oracle, bounds, memory, BPTT."""

import math

import numpy as np
import pytest

from flowcast.autodiff import Tensor, backward, mean_all
from flowcast.convlstm import ConvLSTM, FlowHead, aggregate
from flowcast.errors import ShapeError, UsageError
from flowcast.flownet import FlowCNN

from helpers import check_gradients


def scalar_lstm(wx_centers, wh_centers, biases):
    """Channels=1 LSTM acting on 1x1 inputs: only the kernel center matters."""
    lstm = ConvLSTM(channels=1, seed=0, dtype=np.float64)
    lstm.wx.data[:] = 0.0
    lstm.wh.data[:] = 0.0
    for k in range(4):
        lstm.wx.data[k, 0, 1, 1] = wx_centers[k]
        lstm.wh.data[k, 0, 1, 1] = wh_centers[k]
        lstm.bias.data[k] = biases[k]
    return lstm


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


class TestStep:
    def test_zero_parameters_give_zero_state(self):
        lstm = ConvLSTM(channels=3, seed=0)
        for p in lstm.params().values():
            p.data[:] = 0.0
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32))
        h, c = lstm.step(x, lstm.init_state(2, 4, 4))
        assert np.all(h.data == 0.0) and np.all(c.data == 0.0)

    def test_output_shape_matches_input(self):
        lstm = ConvLSTM(channels=5, seed=1)
        x = Tensor(np.zeros((1, 5, 6, 8), dtype=np.float32))
        h, c = lstm.step(x, lstm.init_state(1, 6, 8))
        assert h.data.shape == x.data.shape == c.data.shape

    def test_matches_scalar_gate_arithmetic(self):
        wx = [0.3, 0.4, 0.5, 0.6]  # i, f, o, g
        wh = [-0.2, 0.1, 0.2, -0.3]
        bias = [0.1, 1.0, -0.1, 0.2]
        lstm = scalar_lstm(wx, wh, bias)

        state = lstm.init_state(1, 1, 1)
        h_ref, c_ref = 0.0, 0.0
        for x_val in (0.7, -0.4):
            state = lstm.step(Tensor(np.full((1, 1, 1, 1), x_val)), state)
            i = sig(wx[0] * x_val + wh[0] * h_ref + bias[0])
            f = sig(wx[1] * x_val + wh[1] * h_ref + bias[1])
            o = sig(wx[2] * x_val + wh[2] * h_ref + bias[2])
            g = math.tanh(wx[3] * x_val + wh[3] * h_ref + bias[3])
            c_ref = f * c_ref + i * g
            h_ref = o * math.tanh(c_ref)
            assert state[1].data[0, 0, 0, 0] == pytest.approx(c_ref, rel=1e-12)
            assert state[0].data[0, 0, 0, 0] == pytest.approx(h_ref, rel=1e-12)

    def test_hidden_bounded_regardless_of_parameters(self):
        rng = np.random.default_rng(2)
        lstm = ConvLSTM(channels=2, seed=2, dtype=np.float64)
        for p in lstm.params().values():
            p.data[:] = 20.0 * rng.standard_normal(p.data.shape)
        state = lstm.init_state(1, 4, 4)
        for _ in range(10):
            x = Tensor(10.0 * rng.standard_normal((1, 2, 4, 4)))
            state = lstm.step(x, state)
            assert np.all(np.abs(state[0].data) < 1.0)

    def test_forget_bias_starts_at_one(self):
        lstm = ConvLSTM(channels=4, seed=0)
        np.testing.assert_array_equal(lstm.bias.data[4:8], 1.0)
        np.testing.assert_array_equal(lstm.bias.data[:4], 0.0)

    def test_spatial_mismatch_rejected(self):
        lstm = ConvLSTM(channels=2)
        x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            lstm.step(x, lstm.init_state(1, 6, 6))


class TestHead:
    def test_zero_initialized(self):
        head = FlowHead(channels=6)
        out = head(Tensor(np.random.default_rng(0).random((1, 6, 4, 4)).astype(np.float32)))
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("channels", [4, 16])
    def test_two_output_channels(self, channels):
        head = FlowHead(channels=channels)
        out = head(Tensor(np.zeros((2, channels, 3, 5), dtype=np.float32)))
        assert out.data.shape == (2, 2, 3, 5)


class TestAggregate:
    def build(self, seed, channels=4, random_head=True, dtype=np.float64):
        rng = np.random.default_rng(seed)
        net = FlowCNN(channels=channels, seed=seed, dtype=dtype)
        lstm = ConvLSTM(channels=channels, seed=seed + 1, dtype=dtype)
        head = FlowHead(channels=channels, dtype=dtype)
        if random_head:
            head.w.data[:] = 0.3 * rng.standard_normal(head.w.data.shape)
        return net, lstm, head

    def pairs(self, seed, k=3, h=16, w=16):
        rng = np.random.default_rng(seed)
        return [
            (Tensor(rng.random((1, 3, h, w))), Tensor(rng.random((1, 3, h, w))))
            for _ in range(k)
        ]

    def test_full_resolution_output_shape(self):
        net, lstm, head = self.build(0)
        flow, state = aggregate(net, lstm, head, self.pairs(1, k=2, h=64, w=128))
        assert flow.data.shape == (1, 2, 64, 128)
        assert state[0].data.shape == (1, 4, 16, 32)

    def test_untrained_static_scene_is_zero(self):
        net, lstm, head = self.build(0, random_head=False)
        frame = Tensor(np.random.default_rng(3).random((1, 3, 16, 16)))
        one, _ = aggregate(net, lstm, head, [(frame, frame)])
        two, _ = aggregate(net, lstm, head, [(frame, frame), (frame, frame)])
        assert np.all(one.data == 0.0) and np.all(two.data == 0.0)

    def test_empty_sequence_rejected(self):
        net, lstm, head = self.build(0)
        with pytest.raises(UsageError):
            aggregate(net, lstm, head, [])

    def test_order_matters(self):
        # temporal memory: reversing the pair sequence changes the output for
        # at least one seed
        hits = 0
        for seed in range(5):
            net, lstm, head = self.build(seed)
            pairs = self.pairs(seed + 10)
            ordered, _ = aggregate(net, lstm, head, pairs)
            reversed_, _ = aggregate(net, lstm, head, pairs[::-1])
            if np.abs(ordered.data - reversed_.data).max() > 1e-6:
                hits += 1
        assert hits >= 1

    def test_state_threads_through_calls(self):
        net, lstm, head = self.build(4)
        pairs = self.pairs(20, k=2)
        whole, _ = aggregate(net, lstm, head, pairs)
        _, mid_state = aggregate(net, lstm, head, pairs[:1])
        resumed, _ = aggregate(net, lstm, head, pairs[1:], state=mid_state)
        np.testing.assert_allclose(whole.data, resumed.data, atol=1e-12)

    def test_no_lstm_variant_skips_memory(self):
        net, lstm, head = self.build(5)
        pairs = self.pairs(30)
        memoryless, _ = aggregate(net, lstm, head, pairs, use_lstm=False)
        last_only, _ = aggregate(net, lstm, head, pairs[-1:], use_lstm=False)
        np.testing.assert_allclose(memoryless.data, last_only.data, atol=1e-12)
        recurrent, _ = aggregate(net, lstm, head, pairs)
        assert np.abs(memoryless.data - recurrent.data).max() > 1e-8


class TestBptt:
    def test_three_step_unroll_gradients(self):
        rng = np.random.default_rng(6)
        lstm = ConvLSTM(channels=2, seed=6, dtype=np.float64)
        head = FlowHead(channels=2, dtype=np.float64)
        head.w.data[:] = 0.4 * rng.standard_normal(head.w.data.shape)
        head.w.requires_grad = True
        head.b.requires_grad = True
        xs = [Tensor(rng.standard_normal((1, 2, 3, 3))) for _ in range(3)]

        def loss():
            state = lstm.init_state(1, 3, 3)
            for x in xs:
                state = lstm.step(x, state)
            return mean_all(head(state[0]))

        params = list(lstm.params().values()) + [head.w, head.b]
        check_gradients(loss, params)

    def test_gradient_reaches_first_input(self):
        rng = np.random.default_rng(7)
        lstm = ConvLSTM(channels=2, seed=7, dtype=np.float64)
        xs = [Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True) for _ in range(3)]
        state = lstm.init_state(1, 3, 3)
        for x in xs:
            state = lstm.step(x, state)
        backward(mean_all(state[0]))
        assert np.abs(xs[0].grad).max() > 0.0
