"""Training objectives: masked cross-entropy, smooth-l1 reconstruction, and
their weighted combination with a step-annealed RGB weight."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, record, scale
from .errors import ConfigError, ShapeError
from .warp import VOID

LOG_EPS = 1e-8  # clamp inside -log so a zero probability stays finite


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    # (iteration, lambda2) breakpoints; left-closed, piecewise constant
    anneal_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        its = [it for it, _ in self.anneal_schedule]
        vals = [v for _, v in self.anneal_schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ConfigError(f"schedule iterations must strictly increase, got {its}")
        seq = [self.lambda2] + vals
        if any(b > a for a, b in zip(seq, seq[1:])) or any(v < 0 for v in vals):
            raise ConfigError(f"schedule values must be non-increasing and nonnegative, got {seq}")

    def lambda2_at(self, iteration: int) -> float:
        value = self.lambda2
        for it, v in self.anneal_schedule:
            if iteration >= it:
                value = v
        return value


def default_weights(max_iterations: int) -> LossWeights:
    """Equal weights early, then step the RGB weight down to 0 by 75% of training.

    Very short runs collapse neighbouring breakpoints onto the same iteration;
    the latest (lowest) value wins and breakpoints at iteration 0 are folded
    away, so the schedule stays valid down to max_iterations = 1.
    """
    merged = {}
    for it, v in (
        (max_iterations // 4, 0.5),
        (max_iterations // 2, 0.1),
        (3 * max_iterations // 4, 0.0),
    ):
        if it > 0:
            merged[it] = v
    return LossWeights(lambda1=1.0, lambda2=1.0, anneal_schedule=tuple(sorted(merged.items())))


def seg_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean -log p(gt class) over non-VOID pixels.

    ``pred`` holds per-class probabilities (N, C, H, W); ``gt`` integer labels
    (N, H, W). VOID pixels contribute neither loss nor gradient. An all-VOID
    map yields 0 with a warning.
    """
    gt = np.asarray(gt)
    n, c, h, w = pred.data.shape
    if gt.shape != (n, h, w):
        raise ShapeError(f"gt shape {gt.shape} does not match pred {pred.data.shape}")
    valid = gt != VOID
    if not np.all((gt < c) | ~valid):
        raise ShapeError(f"gt labels exceed {c} classes")
    count = int(valid.sum())
    if count == 0:
        warnings.warn("seg_loss: every pixel is VOID; loss defined as 0", RuntimeWarning)
        return Tensor(0.0)

    gt_idx = np.where(valid, gt, 0).astype(np.int64)[:, None]  # (N, 1, H, W)
    p = np.take_along_axis(pred.data, gt_idx, axis=1)[:, 0]
    clamped = np.maximum(p, LOG_EPS)
    value = (-np.log(clamped) * valid).sum() / count

    def backward_fn(g):
        # clamp saturates: below LOG_EPS the value no longer depends on p
        per_pixel = np.where(valid & (p > LOG_EPS), -1.0 / clamped, 0.0) * (g / count)
        gp = np.zeros_like(pred.data)
        np.put_along_axis(gp, gt_idx, per_pixel[:, None].astype(pred.data.dtype), axis=1)
        return (gp,)

    return record(np.asarray(value), (pred,), backward_fn, "seg_ce")


def rgb_loss(pred: Tensor, gt, literal_sum: bool = False) -> Tensor:
    """Smooth-l1 between predicted and target frames.

    Per-element by default: 0.5 d^2 where |d| < 1, |d| - 0.5 beyond, averaged
    over all elements. ``literal_sum`` instead applies the two branches to the
    summed absolute difference of the whole image (one saturated pixel then
    switches everything to the linear branch).
    """
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if gt.shape != pred.data.shape:
        raise ShapeError(f"gt shape {gt.shape} does not match pred {pred.data.shape}")
    d = pred.data - gt

    if literal_sum:
        total = np.abs(d).sum()
        value = 0.5 * total * total if total < 1.0 else total - 0.5

        def backward_sum(g):
            outer = total if total < 1.0 else 1.0
            return (g * outer * np.sign(d),)

        return record(np.asarray(value), (pred,), backward_sum, "smooth_l1_sum")

    absd = np.abs(d)
    per = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    value = per.mean()

    def backward_fn(g):
        return ((np.where(absd < 1.0, d, np.sign(d))) * (g / d.size),)

    return record(np.asarray(value), (pred,), backward_fn, "smooth_l1")


def total_loss(seg: Tensor, rgb: Tensor, weights: LossWeights, iteration: int) -> Tensor:
    if iteration < 0:
        raise ConfigError(f"iteration must be nonnegative, got {iteration}")
    return add(scale(seg, weights.lambda1), scale(rgb, weights.lambda2_at(iteration)))
