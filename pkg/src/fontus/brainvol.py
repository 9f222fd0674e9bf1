"""Total brain volume from a US volume: skull detection, ellipsoid fit, scaling.

Stages: centroid heuristic (65% height rule) -> intensity + shell skull
detection -> PCA-framed least-squares ellipsoid fit (two passes, the second
with the first fit as shell prior) -> volume = 4/3 pi a b c * cf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ellipsoid import Ellipsoid, quadratic_form_grid
from .errors import DegenerateGeometryError, NoSkullDetectedError
from .optimize import minimize_dfo
from .volume import LabelMap, Volume, intensity_percentile


@dataclass(frozen=True)
class BrainVolumeParams:
    cf: float = 0.95
    shell_lo: float = 0.8
    shell_hi: float = 1.3
    percentile: float = 98.0
    z_center_level: float = 0.65
    min_skull_voxels: int = 100
    fit_budget: int = 600

    def __post_init__(self):
        if not 0.0 < self.cf <= 1.0:
            raise ValueError("cf must be in (0, 1]")
        if not self.shell_lo < 1.0 < self.shell_hi:
            raise ValueError("shell bounds must straddle 1")


def estimate_centroid(us: Volume, z_center_level: float = 0.65) -> tuple[float, float, float]:
    """Brain center heuristic from the non-zero footprint.

    z at ``z_center_level`` of the non-zero height; x and y at the middle of
    the non-zero extent within that z slice.
    """
    nz = us.data != 0
    if not nz.any():
        raise ValueError("volume has no non-zero voxels")
    z_any = np.where(nz.any(axis=(0, 1)))[0]
    oz, sz = us.origin[2], us.spacing[2]
    z_min = oz + sz * z_any[0]
    z_max = oz + sz * z_any[-1]
    z_c = z_min + z_center_level * (z_max - z_min)
    k = int(np.clip(round((z_c - oz) / sz), z_any[0], z_any[-1]))
    plane = nz[:, :, k]
    if not plane.any():
        # fall back to the nearest populated slice
        populated = np.where(nz.any(axis=(0, 1)))[0]
        k = int(populated[np.argmin(np.abs(populated - k))])
        plane = nz[:, :, k]
    xs = np.where(plane.any(axis=1))[0]
    ys = np.where(plane.any(axis=0))[0]
    x_c = us.origin[0] + us.spacing[0] * (xs[0] + xs[-1]) / 2.0
    y_c = us.origin[1] + us.spacing[1] * (ys[0] + ys[-1]) / 2.0
    return (float(x_c), float(y_c), float(z_c))


def initial_prior(us: Volume, centroid: tuple[float, float, float]) -> Ellipsoid:
    """Shell prior before any fit.

    Lateral semi-axes come from the non-zero extent in the centroid z slice;
    the vertical one from the distance to the top of the non-zero footprint
    (the skull dome is the reliable boundary in a transfontanelle geometry).
    """
    nz = us.data != 0
    oz, sz = us.origin[2], us.spacing[2]
    k = int(np.clip(round((centroid[2] - oz) / sz), 0, us.dims[2] - 1))
    plane = nz[:, :, k]
    if not plane.any():
        raise DegenerateGeometryError("no non-zero voxels in the centroid plane")
    xs = np.where(plane.any(axis=1))[0]
    ys = np.where(plane.any(axis=0))[0]
    a = max(us.spacing[0] * (xs[-1] - xs[0]) / 2.0, us.spacing[0])
    b = max(us.spacing[1] * (ys[-1] - ys[0]) / 2.0, us.spacing[1])
    z_top = oz + sz * np.where(nz.any(axis=(0, 1)))[0][-1]
    c = max(z_top - centroid[2], sz)
    return Ellipsoid(centroid, (a, b, c))


def detect_skull_voxels(us: Volume, prior: Ellipsoid, params: BrainVolumeParams) -> LabelMap:
    """Voxels above the 98th percentile and inside the prior's shell band."""
    threshold = intensity_percentile(us, params.percentile, nonzero_only=True)
    q = quadratic_form_grid(prior, us.dims, us.spacing, us.origin)
    mask = (us.data > threshold) & (q > params.shell_lo) & (q < params.shell_hi)
    if not mask.any():
        raise NoSkullDetectedError(
            f"no voxel exceeds the {params.percentile:g} percentile inside the shell"
        )
    return LabelMap(mask.astype(np.uint8), us.spacing, us.origin)


def _pca_frame(points: np.ndarray) -> np.ndarray:
    """Deterministic PCA rotation (rows = principal axes, descending variance)."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-9 * max(evals[-1], 1e-12):
        raise DegenerateGeometryError("skull point cloud has rank < 3")
    order = np.argsort(evals)[::-1]
    axes = evecs[:, order].T
    # sign convention: largest-magnitude component positive
    for i in range(3):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    if np.linalg.det(axes) < 0:
        axes[2] = -axes[2]
    return axes


def fit_ellipsoid(skull: LabelMap, budget: int = 600) -> tuple[Ellipsoid, float]:
    """Least-squares ellipsoid on labeled voxels; returns (ellipsoid, residual RMS).

    Orientation is fixed by PCA of the voxel positions; center and semi-axes
    minimize the mean squared algebraic residual (quadratic form - 1)^2 with a
    bounded derivative-free search started from the PCA moments.
    """
    idx = np.argwhere(skull.data > 0)
    if len(idx) < 100:
        raise DegenerateGeometryError(f"need >= 100 skull voxels, got {len(idx)}")
    points = skull.index_to_mm(idx)
    rot = _pca_frame(points)
    center0 = points.mean(axis=0)
    local = (points - center0) @ rot.T
    axes0 = np.sqrt(3.0) * np.maximum(local.std(axis=0), 1e-3)

    def objective(theta):
        ctr = theta[:3]
        ax = theta[3:]
        q = np.sum(((local - ctr) / ax) ** 2, axis=1)
        return float(np.mean((q - 1.0) ** 2))

    x0 = np.concatenate([np.zeros(3), axes0])
    lower = np.concatenate([-0.5 * axes0, 0.4 * axes0])
    upper = np.concatenate([0.5 * axes0, 2.5 * axes0])
    result = minimize_dfo(objective, x0, lower, upper, max_evals=budget,
                          initial_radius=np.concatenate([0.15 * axes0, 0.15 * axes0]))
    center_world = center0 + result.x[:3] @ rot
    fitted = Ellipsoid(tuple(center_world), tuple(result.x[3:]), rot)
    return fitted, float(np.sqrt(result.fun))


def brain_volume_from_ellipsoid(e: Ellipsoid, params: BrainVolumeParams) -> float:
    """V = 4/3 pi a b c cf."""
    return e.volume * params.cf


@dataclass(frozen=True)
class BrainVolumeEstimate:
    ellipsoid: Ellipsoid
    volume_mm3: float
    residual_rms: float
    cf: float
    centroid: tuple[float, float, float]
    skull_voxels: int

    def to_dict(self) -> dict:
        return {
            "ellipsoid": self.ellipsoid.to_dict(),
            "volume_mm3": self.volume_mm3,
            "residual_rms": self.residual_rms,
            "cf": self.cf,
            "centroid": list(self.centroid),
            "skull_voxels": self.skull_voxels,
        }


def estimate_brain_volume(us: Volume, params: BrainVolumeParams | None = None) -> BrainVolumeEstimate:
    """Full two-pass procedure: centroid -> prior -> detect -> fit -> refine -> volume."""
    params = params or BrainVolumeParams()
    centroid = estimate_centroid(us, params.z_center_level)
    prior = initial_prior(us, centroid)
    skull1 = detect_skull_voxels(us, prior, params)
    e1, _ = fit_ellipsoid(skull1, params.fit_budget)
    skull2 = detect_skull_voxels(us, e1, params)
    e2, rms = fit_ellipsoid(skull2, params.fit_budget)
    volume = brain_volume_from_ellipsoid(e2, params)
    return BrainVolumeEstimate(
        ellipsoid=e2,
        volume_mm3=volume,
        residual_rms=rms,
        cf=params.cf,
        centroid=centroid,
        skull_voxels=int(np.count_nonzero(skull2.data)),
    )


@dataclass(frozen=True)
class CfCalibration:
    cf: float
    loo_mean_abs_rel_error: float
    loo_max_abs_rel_error: float
    per_pair_errors: tuple

    def to_dict(self) -> dict:
        return {
            "cf": self.cf,
            "loo_mean_abs_rel_error": self.loo_mean_abs_rel_error,
            "loo_max_abs_rel_error": self.loo_max_abs_rel_error,
            "per_pair_errors": list(self.per_pair_errors),
        }


def calibrate_cf(reference_pairs: list[tuple[Ellipsoid, float]]) -> CfCalibration:
    """cf = mean(true volume / ellipsoid volume) with leave-one-out error stats."""
    if len(reference_pairs) < 3:
        raise ValueError(f"need at least 3 reference pairs, got {len(reference_pairs)}")
    ratios = np.asarray([true_vol / e.volume for e, true_vol in reference_pairs])
    cf = float(ratios.mean())
    errors = []
    for i, (e, true_vol) in enumerate(reference_pairs):
        cf_i = float(np.delete(ratios, i).mean())
        predicted = cf_i * e.volume
        errors.append(abs(predicted - true_vol) / true_vol)
    errors = np.asarray(errors)
    return CfCalibration(
        cf=cf,
        loo_mean_abs_rel_error=float(errors.mean()),
        loo_max_abs_rel_error=float(errors.max()),
        per_pair_errors=tuple(float(v) for v in errors),
    )
