"""Pinhole projection between image plane (pixel + disparity) and 3D metric space.

Conventions: pixel coordinates are continuous and refer to the sample center
(no half-pixel offset); the camera looks down +z; all math is float64.
(u, v) is (column, row).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import DimensionMismatch, DisparityTooSmall, NonPositiveDepth

DEFAULT_MIN_DISPARITY = 1e-6

#: Class id reserved for points that carry no semantic label.
UNLABELED = 255


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus the stereo baseline that scales disparity."""

    f_x: float
    f_y: float
    o_x: float
    o_y: float
    b: float

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0 and self.b > 0):
            raise ValueError("focal lengths and baseline must be positive")
        if not (np.isfinite(self.o_x) and np.isfinite(self.o_y)):
            raise ValueError("principal point must be finite")


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    label: Optional[int] = None


@dataclass
class LabeledCloud:
    """Labeled 3D points in row-major source-pixel order (v outer, u inner).

    Stored as arrays for speed: ``xyz`` is (N, 3) float64 and ``labels`` is
    (N,) int32 with :data:`UNLABELED` marking points without a class.
    """

    xyz: np.ndarray
    labels: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.labels is None:
            self.labels = np.full(len(self.xyz), UNLABELED, dtype=np.int32)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if len(self.labels) != len(self.xyz):
            raise DimensionMismatch(
                f"{len(self.xyz)} points but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.xyz)

    def __iter__(self) -> Iterator[Point3]:
        for (x, y, z), lab in zip(self.xyz, self.labels):
            yield Point3(x, y, z, None if lab == UNLABELED else int(lab))

    @classmethod
    def from_points(cls, points: list[Point3]) -> "LabeledCloud":
        xyz = np.array([(p.x, p.y, p.z) for p in points], dtype=np.float64)
        labels = np.array(
            [UNLABELED if p.label is None else p.label for p in points],
            dtype=np.int32,
        )
        return cls(xyz.reshape(-1, 3), labels)


def project_pixel(
    u: float,
    v: float,
    d: float,
    k: CameraIntrinsics,
    min_disparity: float = DEFAULT_MIN_DISPARITY,
) -> Point3:
    """Map an image-plane sample (u, v) with disparity d to its 3D point.

    Returns (b*(u - o_x)/d, b*f_x*(v - o_y)/(f_y*d), b*f_x/d).
    """
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ValueError("pixel coordinates must be finite")
    if not d > min_disparity:
        raise DisparityTooSmall(f"disparity {d} <= {min_disparity}")
    x = k.b * (u - k.o_x) / d
    y = k.b * k.f_x * (v - k.o_y) / (k.f_y * d)
    z = k.b * k.f_x / d
    return Point3(x, y, z)


def unproject_point(p: Point3, k: CameraIntrinsics) -> tuple[float, float, float]:
    """Algebraic inverse of :func:`project_pixel`; returns (u, v, d)."""
    if not p.z > 0:
        raise NonPositiveDepth(f"z = {p.z}")
    u = p.x * k.f_x / p.z + k.o_x
    v = p.y * k.f_y / p.z + k.o_y
    d = k.b * k.f_x / p.z
    return u, v, d


def project_points(
    u: np.ndarray, v: np.ndarray, d: np.ndarray, k: CameraIntrinsics
) -> np.ndarray:
    """Vectorized projection of (u, v, d) arrays to an (N, 3) point array.

    Callers are responsible for filtering disparities beforehand.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    x = k.b * (u - k.o_x) / d
    y = k.b * k.f_x * (v - k.o_y) / (k.f_y * d)
    z = k.b * k.f_x / d
    return np.stack([x, y, z], axis=-1)


def unproject_points(
    xyz: np.ndarray, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized inverse of :func:`project_points` for (N, 3) input."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    u = x * k.f_x / z + k.o_x
    v = y * k.f_y / z + k.o_y
    d = k.b * k.f_x / z
    return u, v, d


def project_map(
    disparity: np.ndarray,
    labels: np.ndarray,
    k: CameraIntrinsics,
    min_disparity: float = DEFAULT_MIN_DISPARITY,
) -> LabeledCloud:
    """Project a disparity raster with per-pixel labels into a labeled cloud.

    Emits one point per pixel with disparity > min_disparity, in row-major
    order; pixels at or below the threshold are skipped.
    """
    disparity = np.asarray(disparity, dtype=np.float64)
    labels = np.asarray(labels)
    if disparity.shape != labels.shape:
        raise DimensionMismatch(
            f"disparity {disparity.shape} vs labels {labels.shape}"
        )
    h, w = disparity.shape
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    keep = disparity > min_disparity
    xyz = project_points(uu[keep], vv[keep], disparity[keep], k)
    return LabeledCloud(xyz, labels[keep].astype(np.int32))
