"""Current-frame segmentation: a small learned CNN and a ground-truth oracle.

Both expose ``segment(frame, labels=None) -> probability Tensor``. The oracle
returns a one-hot encoding of the provided labels and exists to isolate the
flow path's error from segmentation error; the learned net ignores ``labels``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, conv2d, relu, softmax_channels, uniform_init, zeros_param
from .errors import ConfigError, DataError, ShapeError, UsageError
from .warp import VOID


def one_hot_probs(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels to (N, C, H, W) one-hot; VOID is not encodable."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be (N, H, W), got {labels.shape}")
    if np.any(labels == VOID) or np.any(labels >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes - 1}] to one-hot encode")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out


class SegCNN:
    """4-layer full-resolution CNN with a softmax head."""

    def __init__(self, num_classes: int, width: int = 16, seed: int = 0, dtype=np.float32):
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)

        def conv_init(c_in, c_out, gain):
            w = uniform_init(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9, dtype=dtype, gain=gain)
            return w, zeros_param((c_out,), dtype=dtype)

        relu_gain = float(np.sqrt(6.0))  # He-style bounds for the ReLU stack
        self.conv1 = conv_init(3, width, relu_gain)
        self.conv2 = conv_init(width, width, relu_gain)
        self.conv3 = conv_init(width, width, relu_gain)
        self.conv4 = conv_init(width, num_classes, 1.0)  # softmax head: small logits

    def params(self) -> dict:
        out = {}
        for name in ("conv1", "conv2", "conv3", "conv4"):
            w, b = getattr(self, name)
            out[f"{name}.w"] = w
            out[f"{name}.b"] = b
        return out

    def segment(self, frame: Tensor, labels=None) -> Tensor:
        x = relu(conv2d(frame, *self.conv1, pad=1))
        x = relu(conv2d(x, *self.conv2, pad=1))
        x = relu(conv2d(x, *self.conv3, pad=1))
        return softmax_channels(conv2d(x, *self.conv4, pad=1))


class OracleSeg:
    """Ground-truth segmentation: one-hot of the labels handed in per call."""

    def __init__(self, num_classes: int, dtype=np.float32):
        self.num_classes = num_classes
        self.dtype = dtype

    def params(self) -> dict:
        return {}

    def segment(self, frame: Tensor, labels=None) -> Tensor:
        if labels is None:
            raise UsageError("oracle segmentation needs ground-truth labels")
        probs = one_hot_probs(np.asarray(labels), self.num_classes, dtype=self.dtype)
        if probs.shape[0] != frame.data.shape[0] or probs.shape[2:] != frame.data.shape[2:]:
            raise ShapeError(
                f"labels {np.asarray(labels).shape} do not match frame {frame.data.shape}"
            )
        return Tensor(probs)
