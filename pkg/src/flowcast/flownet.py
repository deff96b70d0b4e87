"""Pairwise flow network: a concatenated frame pair goes through three conv
blocks (two 2x2 average-poolings take the extent to a quarter) and two
refinement convs; a zero-initialized 3x3 head reads flow off the penultimate
features, so an untrained network predicts exactly zero motion.

The penultimate features are what the recurrent aggregator consumes; the pair
flow head exists for supervised pretraining and the warp-last baseline.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    avg_pool2d,
    concat_channels,
    conv2d,
    leaky_relu,
    uniform_init,
    zeros_param,
)
from .errors import ConfigError, ShapeError


class FlowCNN:
    """f_F: (frame_a, frame_b) -> (features at /4, flow at /4)."""

    def __init__(self, channels: int = 16, seed: int = 0, dtype=np.float32):
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        self.channels = channels
        rng = np.random.default_rng(seed)
        f = channels

        def conv_init(c_in, c_out, k=3):
            # He-style bounds: every block is rectifier-activated, so preserve
            # activation variance through the stack instead of shrinking it
            w = uniform_init(
                rng, (c_out, c_in, k, k), fan_in=c_in * k * k, dtype=dtype, gain=np.sqrt(6.0)
            )
            b = zeros_param((c_out,), dtype=dtype)
            return w, b

        self.conv1 = conv_init(6, f)
        self.conv2 = conv_init(f, f)
        self.conv3 = conv_init(f, f)
        self.conv4 = conv_init(f, f)
        self.conv5 = conv_init(f, f)
        # zero head: untrained flow is identically zero
        self.head = (zeros_param((2, f, 3, 3), dtype=dtype), zeros_param((2,), dtype=dtype))

    def params(self) -> dict:
        out = {}
        for name in ("conv1", "conv2", "conv3", "conv4", "conv5", "head"):
            w, b = getattr(self, name)
            out[f"{name}.w"] = w
            out[f"{name}.b"] = b
        return out

    def forward(self, frame_a: Tensor, frame_b: Tensor):
        if frame_a.data.shape != frame_b.data.shape:
            raise ShapeError(
                f"frame shapes differ: {frame_a.data.shape} vs {frame_b.data.shape}"
            )
        n, c, h, w = frame_a.data.shape
        if c != 3:
            raise ShapeError(f"frames must have 3 channels, got {c}")
        if h % 4 or w % 4:
            raise ConfigError(f"extents {h}x{w} must divide by 4")

        # leaky activations: flow regression pulls most outputs toward zero
        # (static background dominates), and plain ReLU units silenced by
        # that pressure would stop learning permanently
        x = concat_channels([frame_a, frame_b])
        x = avg_pool2d(leaky_relu(conv2d(x, *self.conv1, pad=1)), 2)
        x = avg_pool2d(leaky_relu(conv2d(x, *self.conv2, pad=1)), 2)
        x = leaky_relu(conv2d(x, *self.conv3, pad=1))
        x = leaky_relu(conv2d(x, *self.conv4, pad=1))
        features = leaky_relu(conv2d(x, *self.conv5, pad=1))
        flow = conv2d(features, *self.head, pad=1)
        return features, flow


def downscale_flow(flow: np.ndarray, factor: int = 4) -> np.ndarray:
    """Ground-truth flow at /factor: block-averaged and divided by factor.

    Displacements measured in pixels shrink with the grid; this is the target
    the /4 flow head is trained against.
    """
    flow = np.asarray(flow)
    c, h, w = flow.shape[-3:]
    if c != 2 or h % factor or w % factor:
        raise ShapeError(f"flow {flow.shape} not divisible by {factor}")
    blocks = flow.reshape(*flow.shape[:-2], h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1)) / factor
