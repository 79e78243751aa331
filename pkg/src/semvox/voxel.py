"""Accumulate labeled 3D points into an occupancy grid and resolve semantics.

Grid linearization for serialized formats is index = (k*Y + j)*X + i with i
fastest; in memory counts are a dense (X, Y, Z) array so `counts[i, j, k]`
matches the voxel index tuple.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import SpecMismatch
from .geometry import UNLABELED, LabeledCloud

#: Label value for unoccupied / unlabeled voxels in a SemanticGrid.
FREE = 255

DEFAULT_MIN_POINTS = 10
DEFAULT_DIMS = (256, 256, 32)
DEFAULT_VOXEL_SIZE = 0.5


@dataclass(frozen=True)
class GridSpec:
    """Voxel counts per axis, edge length in meters, and the minimum corner."""

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ValueError(f"dims must be three counts >= 1, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z


def centered_origin(dims: tuple[int, int, int], voxel_size: float) -> tuple[float, float, float]:
    """Origin that centers the grid laterally and vertically with z forward."""
    return (-dims[0] * voxel_size / 2.0, -dims[1] * voxel_size / 2.0, 0.0)


@dataclass
class OccupancyGrid:
    """Per-voxel point counts plus per-voxel class histograms."""

    spec: GridSpec
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    histograms: dict[tuple[int, int, int], dict[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.spec.dims, dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != self.spec.dims:
                raise SpecMismatch(
                    f"counts shape {self.counts.shape} vs dims {self.spec.dims}"
                )


@dataclass
class SemanticGrid:
    """One class id per voxel; FREE marks unoccupied or unlabeled voxels."""

    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.spec.dims:
            raise SpecMismatch(
                f"labels shape {self.labels.shape} vs dims {self.spec.dims}"
            )


def voxel_index(p, spec: GridSpec) -> Optional[tuple[int, int, int]]:
    """Voxel (i, j, k) containing p, or None when outside the grid.

    A coordinate exactly on a voxel boundary belongs to the upper voxel
    (floor convention); the grid origin is the minimum corner of (0,0,0).
    """
    x0, y0, z0 = spec.origin
    i = int(np.floor((p.x - x0) / spec.voxel_size))
    j = int(np.floor((p.y - y0) / spec.voxel_size))
    k = int(np.floor((p.z - z0) / spec.voxel_size))
    nx, ny, nz = spec.dims
    if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
        return i, j, k
    return None


def voxelize(cloud: LabeledCloud, spec: GridSpec) -> tuple[OccupancyGrid, int]:
    """Bin cloud points into voxels; returns (grid, dropped_count).

    Points outside the grid are dropped and counted rather than raising,
    since arbitrary-scale disparity routinely produces outliers. Labeled
    points additionally feed the per-voxel class histograms.
    """
    grid = OccupancyGrid(spec)
    if len(cloud) == 0:
        return grid, 0
    origin = np.array(spec.origin, dtype=np.float64)
    idx = np.floor((cloud.xyz - origin) / spec.voxel_size).astype(np.int64)
    dims = np.array(spec.dims, dtype=np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    dropped = int(len(cloud) - inside.sum())
    idx = idx[inside]
    np.add.at(grid.counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1)

    labels = cloud.labels[inside]
    labeled = labels != UNLABELED
    if labeled.any():
        rows = np.column_stack([idx[labeled], labels[labeled]])
        uniq, cnt = np.unique(rows, axis=0, return_counts=True)
        for (i, j, k, lab), c in zip(uniq, cnt):
            grid.histograms.setdefault((int(i), int(j), int(k)), {})[int(lab)] = int(c)
    return grid, dropped


def voting_filter(grid: OccupancyGrid, min_points: int = DEFAULT_MIN_POINTS) -> OccupancyGrid:
    """Zero out voxels supported by fewer than min_points points.

    A voxel with exactly min_points survives. Returns a new grid.
    """
    if min_points < 0:
        raise ValueError("min_points must be >= 0")
    counts = grid.counts.copy()
    drop = counts < min_points
    counts[drop] = 0
    hist = {v: dict(h) for v, h in grid.histograms.items() if not drop[v]}
    return OccupancyGrid(grid.spec, counts, hist)


def resolve_semantics(grid: OccupancyGrid) -> SemanticGrid:
    """Majority-vote class per voxel; ties go to the lowest class id.

    Voxels with no points or no labeled points resolve to FREE (occupancy
    information stays in the source grid's counts).
    """
    labels = np.full(grid.spec.dims, FREE, dtype=np.uint8)
    for vox, hist in grid.histograms.items():
        if not hist or grid.counts[vox] == 0:
            continue
        best = min(hist.items(), key=lambda kv: (-kv[1], kv[0]))
        labels[vox] = best[0]
    return SemanticGrid(grid.spec, labels)


def grid_iou(a: SemanticGrid, b: SemanticGrid, class_id: int) -> float:
    """Voxel IoU of one class between two grids; 1.0 when both sets empty."""
    if a.spec != b.spec:
        raise SpecMismatch(f"{a.spec} vs {b.spec}")
    ma = a.labels == class_id
    mb = b.labels == class_id
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(ma & mb) / union)
