"""Convolutional LSTM over flow features, plus the 1x1 head that turns the
hidden state into a future-flow estimate.

Gates use fused 3x3 convolutions (one over the input, one over the hidden
state) sliced in (i, f, o, g) order; no peepholes. The forget bias starts at
1 so early training does not immediately erase the cell. State is an explicit
(hidden, cell) pair — zeros at sequence start, never carried across
sequences.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    conv2d,
    mul,
    scale,
    sigmoid,
    slice_channels,
    tanh,
    uniform_init,
    upsample_bilinear,
    zeros_param,
)
from .errors import ConfigError, ShapeError, UsageError


class ConvLSTM:
    def __init__(self, channels: int = 16, seed: int = 0, dtype=np.float32):
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        self.channels = channels
        rng = np.random.default_rng(seed)
        f = channels
        # gain sqrt(3) keeps gate pre-activations at the scale of the input
        # features (uniform variance bound^2/3), so the hidden state reflects
        # the features from the first step instead of starting near zero
        self.wx = uniform_init(rng, (4 * f, f, 3, 3), fan_in=f * 9, dtype=dtype, gain=np.sqrt(3.0))
        self.wh = uniform_init(rng, (4 * f, f, 3, 3), fan_in=f * 9, dtype=dtype, gain=np.sqrt(3.0))
        bias = np.zeros(4 * f, dtype=dtype)
        bias[f : 2 * f] = 1.0  # forget gate opens early memory
        self.bias = Tensor(bias, requires_grad=True)

    def params(self) -> dict:
        return {"wx": self.wx, "wh": self.wh, "bias": self.bias}

    def init_state(self, n: int, h: int, w: int, dtype=None):
        dtype = dtype or self.wx.data.dtype
        zeros = np.zeros((n, self.channels, h, w), dtype=dtype)
        return Tensor(zeros.copy()), Tensor(zeros.copy())

    def step(self, x: Tensor, state):
        hidden, cell = state
        if x.data.shape != hidden.data.shape:
            raise ShapeError(
                f"input {x.data.shape} does not match state {hidden.data.shape}"
            )
        f = self.channels
        gates = add(conv2d(x, self.wx, self.bias, pad=1), conv2d(hidden, self.wh, None, pad=1))
        i = sigmoid(slice_channels(gates, 0, f))
        fg = sigmoid(slice_channels(gates, f, 2 * f))
        o = sigmoid(slice_channels(gates, 2 * f, 3 * f))
        g = tanh(slice_channels(gates, 3 * f, 4 * f))
        new_cell = add(mul(fg, cell), mul(i, g))
        new_hidden = mul(o, tanh(new_cell))
        return new_hidden, new_cell


class FlowHead:
    """1x1 conv from F channels to a 2-channel flow field; zero-initialized."""

    def __init__(self, channels: int = 16, dtype=np.float32):
        self.w = zeros_param((2, channels, 1, 1), dtype=dtype)
        self.b = zeros_param((2,), dtype=dtype)

    def params(self) -> dict:
        return {"w": self.w, "b": self.b}

    def __call__(self, features: Tensor) -> Tensor:
        return conv2d(features, self.w, self.b, pad=0)


def aggregate(flow_net, lstm, head, pairs, state=None, use_lstm: bool = True):
    """Run the pair encoder over a sequence and read out future flow.

    Each (frame_a, frame_b) pair is encoded by ``flow_net``; features feed the
    LSTM in order, and the head maps the final hidden state to a /4 flow that
    is upsampled x4 (values scaled x4) to full resolution. With
    ``use_lstm=False`` the head reads the last pair's features directly — the
    memoryless ablation. Returns (flow, state).
    """
    pairs = list(pairs)
    if not pairs:
        raise UsageError("aggregate needs at least one frame pair")
    features = None
    for frame_a, frame_b in pairs:
        features, _ = flow_net.forward(frame_a, frame_b)
        if use_lstm:
            if state is None:
                n, _, h, w = features.data.shape
                state = lstm.init_state(n, h, w, dtype=features.data.dtype)
            state = lstm.step(features, state)
    quarter = head(state[0] if use_lstm else features)
    flow = scale(upsample_bilinear(quarter, 4), 4.0)
    return flow, state
