"""Segmentation IoU (per class, mean, moving-objects mean) and flow endpoint
error. IoU accumulates TP/FP/FN counts dataset-wide before dividing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .warp import VOID


@dataclass
class IoUReport:
    counts: np.ndarray  # (C, 3) int64: TP, FP, FN per class
    moving_classes: tuple

    @property
    def per_class(self) -> np.ndarray:
        """IoU per class; NaN where TP+FP+FN = 0 (class absent everywhere)."""
        tp, fp, fn = self.counts[:, 0], self.counts[:, 1], self.counts[:, 2]
        denom = (tp + fp + fn).astype(np.float64)
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    @property
    def mean_iou(self) -> float:
        defined = self.per_class[~np.isnan(self.per_class)]
        return float(defined.mean()) if len(defined) else float("nan")

    @property
    def mean_iou_mo(self) -> float:
        moving = self.per_class[list(self.moving_classes)]
        defined = moving[~np.isnan(moving)]
        return float(defined.mean()) if len(defined) else float("nan")


def iou_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """TP/FP/FN pixel counts per class for one prediction/target pair.

    VOID in gt drops the pixel entirely; VOID in pred is a wrong prediction
    for whatever class the gt assigns (a false negative that is nobody's
    false positive).
    """
    if num_classes <= 0:
        raise UsageError(f"num_classes must be positive, got {num_classes}")
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    counted = gt != VOID
    if not np.all((gt[counted] < num_classes)):
        raise UsageError(f"gt labels exceed num_classes={num_classes}")
    if not np.all((pred < num_classes) | (pred == VOID)):
        raise UsageError(f"pred labels exceed num_classes={num_classes}")

    out = np.zeros((num_classes, 3), dtype=np.int64)
    p, g = pred[counted].astype(np.int64), gt[counted].astype(np.int64)
    hit = p == g
    out[:, 0] = np.bincount(g[hit], minlength=num_classes)
    out[:, 1] = np.bincount(p[~hit & (p != VOID)], minlength=num_classes)
    out[:, 2] = np.bincount(g[~hit], minlength=num_classes)
    return out


def iou(pred, gt, num_classes: int, moving_classes=()) -> IoUReport:
    return IoUReport(iou_counts(pred, gt, num_classes), tuple(moving_classes))


def merge_counts(counts_list) -> np.ndarray:
    return np.sum(np.stack(list(counts_list)), axis=0)


def format_report(report: IoUReport) -> str:
    """One line per class "class_id TP FP FN IoU", then MEAN and MEAN_MO."""
    lines = []
    per = report.per_class
    for cid in range(len(report.counts)):
        tp, fp, fn = report.counts[cid]
        val = "nan" if np.isnan(per[cid]) else f"{per[cid]:.4f}"
        lines.append(f"{cid} {tp} {fp} {fn} {val}")
    lines.append(f"MEAN {report.mean_iou:.4f}")
    lines.append(f"MEAN_MO {report.mean_iou_mo:.4f}")
    return "\n".join(lines)


def endpoint_error(pred: np.ndarray, gt: np.ndarray, exclude: np.ndarray | None = None) -> float:
    """Mean Euclidean distance between flows (2, H, W); ``exclude`` drops pixels."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ShapeError(f"flows must both be (2, H, W), got {pred.shape} vs {gt.shape}")
    err = np.sqrt(((pred - gt) ** 2).sum(axis=0))
    if exclude is not None:
        keep = np.asarray(exclude) == 0
        if not keep.any():
            return 0.0
        err = err[keep]
    return float(err.mean())
