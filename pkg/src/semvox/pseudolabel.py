"""Pseudo-ground-truth tooling: multi-resolution disparity fusion and
uncertainty-guided point selection for segmentation refinement.

Teacher networks live outside this package; they connect through
pre-computed estimate files and the :func:`refine_with_hook` callback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .alignment import apply_scale_shift, fit_scale_shift
from .errors import DegenerateFit, EmptyInput, NoCandidates, OutOfRange, CallbackFailure

log = logging.getLogger(__name__)

#: Fraction of the smaller image dimension used as the receptive-field radius.
RECEPTIVE_FIELD_FRACTION = 0.1


@dataclass(frozen=True)
class ResolutionEstimate:
    """One disparity estimate plus the (w, h) resolution it was produced at."""

    disparity: np.ndarray
    native_resolution: tuple[int, int]


def bilinear_upsample(r: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resample to target (w, h) with the align-corners-false convention.

    Source sample coordinate: src = (dst + 0.5) * scale - 0.5, clamped to the
    valid range. Exact on constants and never overshoots the input bounds.
    """
    r = np.asarray(r, dtype=np.float64)
    src_h, src_w = r.shape
    dst_w, dst_h = int(target[0]), int(target[1])
    if src_h < 1 or src_w < 1 or dst_h < 1 or dst_w < 1:
        raise ValueError(f"bad resample {r.shape} -> {target}")

    def axis_coords(dst_n: int, src_n: int):
        scale = src_n / dst_n
        src = (np.arange(dst_n, dtype=np.float64) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, src_n - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, src_n - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(dst_h, src_h)
    x0, x1, fx = axis_coords(dst_w, src_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = r[np.ix_(y0, x0)] * (1 - fx) + r[np.ix_(y0, x1)] * fx
    bot = r[np.ix_(y1, x0)] * (1 - fx) + r[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def fuse_multi_resolution(
    estimates: Sequence[ResolutionEstimate], target: tuple[int, int]
) -> np.ndarray:
    """Blend disparity estimates from several resolutions into one map.

    The lowest-resolution estimate is the structural base. Every estimate is
    resampled to the target size; non-base estimates are scale/shift aligned
    to the base over their full support, then averaged with a weight
    proportional to the native pixel count, so finer detail is trusted more.
    Estimates whose alignment is degenerate are skipped with a warning.
    """
    if len(estimates) == 0:
        raise EmptyInput("need at least one estimate")
    areas = [e.native_resolution[0] * e.native_resolution[1] for e in estimates]
    base_idx = int(np.argmin(areas))
    resampled = [bilinear_upsample(e.disparity, target) for e in estimates]
    base = resampled[base_idx]
    full = np.ones(base.shape, dtype=bool)

    total = np.zeros_like(base)
    weight_sum = 0.0
    for i, (est, res) in enumerate(zip(estimates, resampled)):
        if i == base_idx:
            aligned = res
        else:
            try:
                aligned = apply_scale_shift(res, fit_scale_shift(res, base, full))
            except DegenerateFit:
                log.warning(
                    "skipping degenerate estimate at native resolution %s",
                    est.native_resolution,
                )
                continue
        w = float(areas[i])
        total += w * aligned
        weight_sum += w
    return total / weight_sum


def _otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Classic between-class-variance threshold over a flat value array."""
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax <= vmin:
        return vmin
    hist, edges = np.histogram(values, bins=bins, range=(vmin, vmax))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mean_total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mean_total - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def far_pixel_fraction(image: np.ndarray, size: tuple[int, int]) -> float:
    """Fraction of pixels farther than the receptive-field radius from an edge.

    Edges are gradient-magnitude pixels above the Otsu threshold; with no
    edges at all, every pixel counts as far.
    """
    w, h = int(size[0]), int(size[1])
    resized = bilinear_upsample(image, (w, h))
    # forward differences: centered stencils are blind to period-2 texture
    gx = np.zeros_like(resized)
    gy = np.zeros_like(resized)
    gx[:, :-1] = np.diff(resized, axis=1)
    gy[:-1, :] = np.diff(resized, axis=0)
    mag = np.hypot(gx, gy)
    if mag.max() <= 0.0:
        return 1.0
    edges = mag > _otsu_threshold(mag)
    if not edges.any():
        return 1.0
    radius = RECEPTIVE_FIELD_FRACTION * min(w, h)
    dist = ndimage.distance_transform_edt(~edges)
    return float(np.mean(dist > radius))


def select_adaptive_resolution(
    image: np.ndarray,
    x_percent: float,
    candidates: Sequence[tuple[int, int]],
) -> tuple[int, int]:
    """Largest candidate resolution keeping the far-from-edge pixel fraction
    within budget.

    Upscaling spreads edges apart; once more than x_percent of pixels sit
    farther than the receptive-field radius from the nearest edge, structure
    degrades. Candidates must be sorted ascending; the largest one is the
    caller-supplied cap. When even the smallest candidate violates the
    budget (e.g. a constant image), the smallest is returned.
    """
    if len(candidates) == 0:
        raise NoCandidates("empty candidate list")
    if not 0.0 < x_percent < 1.0:
        raise ValueError(f"x_percent {x_percent} not in (0, 1)")
    image = np.asarray(image, dtype=np.float64)
    chosen = candidates[0]
    for cand in candidates:
        if far_pixel_fraction(image, cand) <= x_percent:
            chosen = cand
    return tuple(chosen)


def binary_uncertainty(prob: np.ndarray) -> np.ndarray:
    """u = 1 - 2*|p - 0.5|: zero at certain pixels, one at p = 0.5."""
    p = np.asarray(prob, dtype=np.float64)
    if (p < 0).any() or (p > 1).any():
        raise OutOfRange("probabilities must lie in [0, 1]")
    return 1.0 - 2.0 * np.abs(p - 0.5)


def select_uncertain_points(u: np.ndarray, n: int) -> list[tuple[int, int]]:
    """The n most uncertain pixels as (u, v) pairs, ties in row-major order."""
    if n < 0:
        raise ValueError("n must be >= 0")
    values = np.asarray(u, dtype=np.float64)
    w = values.shape[1]
    order = np.argsort(-values.ravel(), kind="stable")[: min(n, values.size)]
    return [(int(i % w), int(i // w)) for i in order]


def refine_with_hook(
    coarse: np.ndarray,
    points: Sequence[tuple[int, int]],
    refiner: Callable,
    features: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Overwrite selected pixels of a coarse label map via an external callback.

    The callback receives ((u, v), feature_vector) and returns a class id;
    the feature vector is sampled from `features` at the pixel when provided,
    otherwise empty. All unselected pixels pass through untouched.
    """
    out = np.asarray(coarse).copy()
    empty = np.empty(0, dtype=np.float64)
    for u, v in points:
        feat = features[v, u] if features is not None else empty
        try:
            out[v, u] = refiner((u, v), feat)
        except Exception as exc:
            raise CallbackFailure(f"refiner failed at pixel ({u}, {v}): {exc}") from exc
    return out
