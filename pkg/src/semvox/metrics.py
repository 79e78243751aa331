"""Depth metrics (RMSE, delta-threshold accuracies) and segmentation IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import apply_scale_shift, fit_scale_shift
from .errors import DimensionMismatch, EmptyMask, NonPositiveValue

DELTA_BASE = 1.25


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    a1: float
    a2: float
    a3: float


@dataclass(frozen=True)
class SegMetrics:
    per_class_iou: dict[int, float]
    mean_iou: float


def _masked(pred, gt, mask):
    m = np.asarray(mask, dtype=bool)
    p = np.asarray(pred, dtype=np.float64)[m]
    g = np.asarray(gt, dtype=np.float64)[m]
    if p.size == 0:
        raise EmptyMask("mask selects no pixels")
    return p, g


def rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    p, g = _masked(pred, gt, mask)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def threshold_accuracy(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, power: int
) -> float:
    """Fraction of masked pixels with max(gt/pred, pred/gt) < 1.25**power."""
    if power not in (1, 2, 3):
        raise ValueError(f"power must be 1, 2 or 3, got {power}")
    p, g = _masked(pred, gt, mask)
    if (p <= 0).any() or (g <= 0).any():
        raise NonPositiveValue("ratio thresholds need positive pred and gt")
    ratio = np.maximum(g / p, p / g)
    return float(np.mean(ratio < DELTA_BASE**power))


def seg_iou(pred: np.ndarray, gt: np.ndarray, classes: list[int]) -> SegMetrics:
    """Per-class and mean IoU; classes with empty union are skipped from the mean."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    per_class: dict[int, float] = {}
    present: list[float] = []
    for c in classes:
        mp = pred == c
        mg = gt == c
        union = int(np.count_nonzero(mp | mg))
        if union == 0:
            continue
        iou = float(np.count_nonzero(mp & mg) / union)
        per_class[c] = iou
        present.append(iou)
    mean = float(np.mean(present)) if present else 0.0
    return SegMetrics(per_class, mean)


def evaluate_depth_aligned(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray
) -> DepthMetrics:
    """Depth metrics after least-squares scale/shift alignment of pred to gt."""
    aligned = apply_scale_shift(pred, fit_scale_shift(pred, gt, mask))
    return DepthMetrics(
        rmse=rmse(aligned, gt, mask),
        a1=threshold_accuracy(aligned, gt, mask, 1),
        a2=threshold_accuracy(aligned, gt, mask, 2),
        a3=threshold_accuracy(aligned, gt, mask, 3),
    )
