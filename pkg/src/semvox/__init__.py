"""Monocular semantic occupancy tooling.

Core pieces: disparity-to-3D projection, scale/shift-invariant alignment,
voxel occupancy grids with voting, depth/segmentation metrics, a desk-scale
autodiff engine with a shared-trunk dual-head model, the patch-wise
memory-bounded training scheduler, and multi-resolution pseudo-label fusion.
"""

from . import alignment, autodiff, geometry, io, metrics, patchwise, pseudolabel, voxel
from .alignment import ScaleShift, apply_scale_shift, fit_scale_shift, ssi_loss
from .geometry import (
    UNLABELED,
    CameraIntrinsics,
    LabeledCloud,
    Point3,
    project_map,
    project_pixel,
    unproject_point,
)
from .metrics import DepthMetrics, SegMetrics, evaluate_depth_aligned
from .patchwise import PatchPlan, patchwise_train, plan_patches, run_patchwise_epochs
from .voxel import (
    FREE,
    GridSpec,
    OccupancyGrid,
    SemanticGrid,
    grid_iou,
    resolve_semantics,
    voting_filter,
    voxelize,
)

__version__ = "0.1.0"
