"""Closed-form scale/shift estimation and the scale-and-shift-invariant loss.

Disparity predictions arrive in arbitrary scale, so they are aligned to a
reference with the affine map s*pred + t that minimizes the masked squared
error. The 2x2 normal equations are solved directly:

    [sum(p^2)  sum(p)] [s]   [sum(p*g)]
    [sum(p)    n     ] [t] = [sum(g)  ]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, NoValidPixels, TooFewPixels

# Masked predictions with variance below this are treated as constant.
VARIANCE_EPS = 1e-12


@dataclass(frozen=True)
class ScaleShift:
    s: float
    t: float


def fit_scale_shift(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> ScaleShift:
    """Least-squares (s, t) minimizing sum over mask of (s*pred + t - gt)^2."""
    p = np.asarray(pred, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    g = np.asarray(gt, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    n = p.size
    if n < 2:
        raise TooFewPixels(f"{n} masked pixels, need at least 2")
    sp = p.sum()
    spp = (p * p).sum()
    if spp / n - (sp / n) ** 2 < VARIANCE_EPS:
        raise DegenerateFit("masked prediction is (near) constant")
    sg = g.sum()
    spg = (p * g).sum()
    det = spp * n - sp * sp
    s = (n * spg - sp * sg) / det
    t = (spp * sg - sp * spg) / det
    return ScaleShift(float(s), float(t))


def apply_scale_shift(pred: np.ndarray, ss: ScaleShift) -> np.ndarray:
    """Elementwise s*pred + t, dimensions preserved."""
    return ss.s * np.asarray(pred, dtype=np.float64) + ss.t


def ssi_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean masked squared error after optimal scale/shift alignment."""
    ss = fit_scale_shift(pred, gt, mask)
    m = np.asarray(mask, dtype=bool)
    r = apply_scale_shift(pred, ss)[m] - np.asarray(gt, dtype=np.float64)[m]
    return float(np.mean(r * r))


def estimate_frame_scale(
    pred: np.ndarray, reference: np.ndarray, mask: np.ndarray
) -> float:
    """Median of reference/pred over masked pixels where both are positive.

    A robust stand-in for per-frame manual scale estimation.
    """
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool) & (p > 0) & (r > 0)
    if not valid.any():
        raise NoValidPixels("no masked pixel with positive pred and reference")
    return float(np.median(r[valid] / p[valid]))
