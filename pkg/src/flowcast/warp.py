"""Differentiable warping of feature maps along a flow field.

The convention throughout is backward warping (gather): the flow field
gives, for every output pixel, the offset into the source image to sample
from. ``out[i, j] = bilinear_sample(src, (i + dy[i, j], j + dx[i, j]))``.
Samples whose entire 2x2 neighbourhood lies outside the image produce zero
and are flagged in the out-of-bounds mask; partially outside samples treat
the missing corners as zero. Gradients flow to both the features and the
flow (the bilinear weights are piecewise linear in the flow).

Flow tensors are (N, 2, H, W): channel 0 is the horizontal displacement dx,
channel 1 the vertical displacement dy, both in pixels.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, record
from .errors import ShapeError

VOID = 255  # reserved label for pixels with no valid source


def _check_flow_against(features_shape, flow_shape):
    if len(flow_shape) != 4 or flow_shape[1] != 2:
        raise ShapeError(f"flow must be (N, 2, H, W), got {flow_shape}")
    if features_shape[0] != flow_shape[0] or features_shape[2:] != flow_shape[2:]:
        raise ShapeError(
            f"features {features_shape} and flow {flow_shape} disagree on batch or spatial extents"
        )


def _sample_coords(flow: np.ndarray):
    """Absolute sampling coordinates (sy, sx) for each output pixel."""
    n, _, h, w = flow.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=flow.dtype), np.arange(w, dtype=flow.dtype), indexing="ij")
    sx = xs[None] + flow[:, 0]
    sy = ys[None] + flow[:, 1]
    return sy, sx


def warp(features: Tensor, flow: Tensor):
    """Bilinearly resample ``features`` along ``flow``.

    Returns ``(warped, mask)`` where ``mask`` is an (N, 1, H, W) uint8 array
    with 1 wherever the sample's whole neighbourhood fell outside the image
    (those outputs are zero). ``warped`` is differentiable w.r.t. both
    arguments; the mask is a plain array.
    """
    _check_flow_against(features.data.shape, flow.data.shape)
    n, c, h, w = features.data.shape

    sy, sx = _sample_coords(flow.data)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    wx = sx - x0
    wy = sy - y0

    src = features.data.reshape(n, c, h * w)

    corner_values = []
    corner_valid = []
    corner_flat = []
    for dy_c, dx_c in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc = y0 + dy_c
        xc = x0 + dx_c
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        flat = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)  # (N, H, W)
        vals = np.take_along_axis(src, flat.reshape(n, 1, h * w), axis=2).reshape(n, c, h, w)
        vals = vals * valid[:, None]
        corner_values.append(vals)
        corner_valid.append(valid)
        corner_flat.append(flat)

    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    weights = (w00, w01, w10, w11)

    out = sum(wt[:, None] * vals for wt, vals in zip(weights, corner_values))
    # A pixel is masked when no in-bounds corner carries any weight, i.e. the
    # boundary rule alone forced the output to zero. (Checking corner validity
    # is not enough: a sample at exactly -1.0 has a valid corner at 0, but
    # with zero weight.)
    valid_weight = sum(wt * valid for wt, valid in zip(weights, corner_valid))
    mask = (valid_weight == 0)[:, None]
    out = out * ~mask
    mask = mask.astype(np.uint8)

    def backward_fn(g):
        g = g * (1 - mask)  # fully-outside outputs are hard zeros
        gfeat = gflow = None
        if features.requires_grad:
            gsrc = np.zeros((n, c, h * w), dtype=features.data.dtype)
            n_idx = np.arange(n)[:, None, None]
            c_idx = np.arange(c)[None, :, None]
            for wt, valid, flat in zip(weights, corner_valid, corner_flat):
                contrib = g * (wt * valid)[:, None]
                np.add.at(gsrc, (n_idx, c_idx, flat.reshape(n, 1, h * w)), contrib.reshape(n, c, h * w))
            gfeat = gsrc.reshape(n, c, h, w)
        if flow.requires_grad:
            # d out / d sx and d out / d sy, with invalid corners contributing zero
            v00, v01, v10, v11 = corner_values
            one = np.ones_like(wx)
            d_dx = ((wy - 1)[:, None] * v00 + ((one - wy))[:, None] * v01
                    - wy[:, None] * v10 + wy[:, None] * v11)
            d_dy = ((wx - 1)[:, None] * v00 - wx[:, None] * v01
                    + (one - wx)[:, None] * v10 + wx[:, None] * v11)
            gflow = np.stack(((g * d_dx).sum(axis=1), (g * d_dy).sum(axis=1)), axis=1)
        return gfeat, gflow

    warped = record(out, (features, flow), backward_fn, "warp")
    return warped, mask


def warp_label_map(labels: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Nearest-neighbour warp for integer label maps.

    Sample locations are rounded (ties at .5 toward the larger index);
    pixels whose rounded source leaves the image become VOID.
    """
    if labels.ndim != 4 or labels.shape[1] != 1:
        raise ShapeError(f"labels must be (N, 1, H, W), got {labels.shape}")
    _check_flow_against(labels.shape, flow.shape)
    n, _, h, w = labels.shape

    sy, sx = _sample_coords(np.asarray(flow, dtype=np.float64))
    xr = np.floor(sx + 0.5).astype(np.int64)  # round half toward larger index
    yr = np.floor(sy + 0.5).astype(np.int64)
    valid = (yr >= 0) & (yr < h) & (xr >= 0) & (xr < w)

    flat = np.clip(yr, 0, h - 1) * w + np.clip(xr, 0, w - 1)
    src = labels.reshape(n, h * w)
    out = np.take_along_axis(src, flat.reshape(n, h * w), axis=1).reshape(n, 1, h, w).copy()
    out[~valid[:, None]] = VOID
    return out


def compose_flows(first: np.ndarray, then: np.ndarray) -> np.ndarray:
    """Sampling flow equivalent to warping by ``first`` and then by ``then``.

    warp(warp(F, first), then) == warp(F, compose_flows(first, then)) away
    from border effects: the composed offset at p is then(p) plus first
    sampled at p + then(p).
    """
    _check_flow_against(first.shape, then.shape)
    first_t = Tensor(first)
    sampled, _ = warp(first_t, Tensor(then))
    return then + sampled.data


def flow_magnitude(flow: np.ndarray) -> np.ndarray:
    """Per-pixel max-norm of a flow field, shape (N, 1, H, W)."""
    return np.abs(flow).max(axis=1, keepdims=True)
