"""Segmentation and volume agreement measures."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyLabelError, GridMismatchError
from .volume import LabelMap


def _require_same_grid(a: LabelMap, b: LabelMap):
    if not a.same_grid(b):
        raise GridMismatchError("label maps are on different grids")


def dice(a: LabelMap, b: LabelMap) -> float:
    """2|A n B| / (|A| + |B|); defined as 1 when both are empty."""
    _require_same_grid(a, b)
    fa = a.data > 0
    fb = b.data > 0
    denom = int(fa.sum()) + int(fb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.count_nonzero(fa & fb)) / denom


def boundary_voxels(a: LabelMap) -> np.ndarray:
    """Indices of foreground voxels with a 6-neighbor background (grid edge counts)."""
    f = a.data > 0
    padded = np.pad(f, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(f & ~interior)


def _boundary_points_mm(a: LabelMap) -> np.ndarray:
    idx = boundary_voxels(a)
    if len(idx) == 0:
        raise EmptyLabelError("label has no foreground voxels")
    return idx * np.asarray(a.spacing)


def mean_absolute_surface_distance(a: LabelMap, b: LabelMap) -> float:
    """Symmetric mean boundary-to-boundary distance (mm), both directions averaged."""
    _require_same_grid(a, b)
    pa = _boundary_points_mm(a)
    pb = _boundary_points_mm(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def hausdorff(a: LabelMap, b: LabelMap) -> float:
    """Max over both directions of the max-min boundary distance (mm)."""
    _require_same_grid(a, b)
    pa = _boundary_points_mm(a)
    pb = _boundary_points_mm(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return max(float(d_ab.max()), float(d_ba.max()))


def label_volume(a: LabelMap) -> float:
    """Foreground voxel count times voxel volume, mm^3."""
    return float(np.count_nonzero(a.data)) * a.voxel_volume


def pearson_r(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1D sequences")
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise ValueError("constant input has no defined correlation")
    return float(np.sum(xc * yc) / (sx * sy))


def ventricle_brain_ratio(v_ventricles: float, v_brain: float) -> float:
    if v_brain <= 0:
        raise ValueError("brain volume must be positive")
    return v_ventricles / v_brain
