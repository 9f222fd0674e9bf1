"""Multimodal atlas-to-US registration.

The similarity is the locally linear correlation metric: within each patch
the US intensities are regressed on {warped MRI intensity, warped MRI
gradient magnitude, constant}; the patch score is the explained-variance
fraction and patches are averaged weighted by their US variance. The
non-rigid stage adds the ventricle pixel-weighting term P (adjusted for
label volume) and optimizes a coarse free-form deformation. Both stages use
the bounded derivative-free trust-region optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import EmptyLabelError, EmptyOverlapError
from .optimize import minimize_dfo
from .volume import LabelMap, Volume, gradient_magnitude

PATCH_RADIUS_DEFAULT = 3
PATCH_STRIDE_DEFAULT = 2
VARIANCE_FLOOR_FRACTION = 1e-4  # of the squared US dynamic range


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMap:
    """x -> matrix @ x + offset (mm -> mm)."""

    matrix: np.ndarray
    offset: np.ndarray

    @staticmethod
    def identity() -> "AffineMap":
        return AffineMap(np.eye(3), np.zeros(3))

    def map_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.matrix.T + self.offset

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """self after inner: x -> self(inner(x))."""
        return AffineMap(self.matrix @ inner.matrix, self.matrix @ inner.offset + self.offset)


@dataclass(frozen=True)
class RigidParams:
    """Euler angles (x, y, z order, radians) and translation (mm)."""

    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def rotation_matrix(self) -> np.ndarray:
        ax, ay, az = self.angles
        cx, sx = np.cos(ax), np.sin(ax)
        cy, sy = np.cos(ay), np.sin(ay)
        cz, sz = np.cos(az), np.sin(az)
        rx = np.asarray([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.asarray([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.asarray([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return rz @ ry @ rx

    def to_affine(self, pivot: np.ndarray) -> AffineMap:
        rot = self.rotation_matrix()
        pivot = np.asarray(pivot, dtype=np.float64)
        offset = pivot - rot @ pivot + np.asarray(self.translation)
        return AffineMap(rot, offset)

    def as_vector(self) -> np.ndarray:
        return np.asarray(self.angles + self.translation, dtype=np.float64)

    @staticmethod
    def from_vector(v: np.ndarray) -> "RigidParams":
        v = np.asarray(v, dtype=np.float64)
        return RigidParams(tuple(v[:3]), tuple(v[3:6]))


@dataclass(frozen=True)
class FreeFormDeformation:
    """Displacements on a coarse control grid, trilinearly interpolated.

    The control grid spans ``origin`` .. ``origin + (dims-1)*spacing`` in the
    fixed (US) frame; displacements are in mm and clamped at the border.
    """

    control_dims: tuple[int, int, int]
    control_spacing: tuple[float, float, float]
    control_origin: tuple[float, float, float]
    displacements: np.ndarray  # (ncx, ncy, ncz, 3)

    def __post_init__(self):
        disp = np.asarray(self.displacements, dtype=np.float64)
        if disp.shape != tuple(self.control_dims) + (3,):
            raise ValueError("displacement array shape mismatch")
        if not np.all(np.isfinite(disp)):
            raise ValueError("non-finite control displacements")
        if any(s <= 0 for s in self.control_spacing):
            raise ValueError("control spacing must be positive")
        disp = np.ascontiguousarray(disp)
        disp.flags.writeable = False
        object.__setattr__(self, "displacements", disp)

    @staticmethod
    def zero(dims, extent_lo, extent_hi) -> "FreeFormDeformation":
        dims = tuple(int(d) for d in dims)
        lo = np.asarray(extent_lo, dtype=np.float64)
        hi = np.asarray(extent_hi, dtype=np.float64)
        spacing = (hi - lo) / (np.asarray(dims) - 1)
        return FreeFormDeformation(dims, tuple(spacing), tuple(lo), np.zeros(dims + (3,)))

    def displacement_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        rel = (pts - np.asarray(self.control_origin)) / np.asarray(self.control_spacing)
        out = np.empty_like(pts)
        for c in range(3):
            out[:, c] = ndimage.map_coordinates(
                self.displacements[..., c], rel.T, order=1, mode="nearest"
            )
        return out


@dataclass(frozen=True)
class CompositeTransform:
    """Fixed(US)-frame mm points -> atlas-frame mm points.

    p -> affine(p + ffd(p)); the affine folds rigid refinement, orientation
    correction and the similarity prior into one matrix.
    """

    affine: AffineMap
    ffd: FreeFormDeformation | None = None

    def map_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if self.ffd is not None:
            pts = pts + self.ffd.displacement_at(pts)
        return self.affine.map_points(pts)


@dataclass(frozen=True)
class PTermParams:
    c1: float = 0.02
    c2: float = 0.25
    i_low: float = 85.0
    i_high: float = 115.0

    def __post_init__(self):
        if self.i_low >= self.i_high:
            raise ValueError("i_low must be below i_high")
        if self.c1 <= 0:
            raise ValueError("c1 must be positive")

    @staticmethod
    def from_us(us: Volume, c1: float = 0.02, c2: float = 0.25,
                low_anchor: float = 85.0, high_anchor: float = 115.0) -> "PTermParams":
        """Windows shifted by the mean non-zero intensity relative to 100."""
        nz = us.data[us.data != 0]
        i_mean = float(nz.mean()) if nz.size else 100.0
        shift = i_mean - 100.0
        return PTermParams(c1=c1, c2=c2, i_low=low_anchor + shift, i_high=high_anchor + shift)


@dataclass(frozen=True)
class AtlasEntry:
    atlas_id: str
    mri: Volume
    ventricle_label: LabelMap
    gradmag: Volume = field(default=None)

    def __post_init__(self):
        if not self.mri.same_grid(self.ventricle_label):
            raise ValueError("atlas label must share the MRI grid")
        if self.gradmag is None:
            object.__setattr__(self, "gradmag", gradient_magnitude(self.mri))


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def _atlas_index_coords(transform, fixed: Volume | LabelMap, atlas: Volume | LabelMap,
                        pts_mm: np.ndarray | None = None) -> np.ndarray:
    if pts_mm is None:
        nx, ny, nz = fixed.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
        pts_mm = fixed.index_to_mm(idx)
    mapped = transform.map_points(pts_mm)
    return (mapped - np.asarray(atlas.origin)) / np.asarray(atlas.spacing)


def warp_volume(moving: Volume, transform, fixed: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``moving`` on the fixed grid through the transform (trilinear).

    Returns (values array shaped like fixed, in-bounds fraction).
    """
    coords = _atlas_index_coords(transform, fixed, moving)
    vals = ndimage.map_coordinates(moving.data, coords.T, order=1, mode="constant", cval=0.0)
    limits = np.asarray(moving.dims, dtype=np.float64) - 1.0
    inside = np.all((coords >= 0.0) & (coords <= limits), axis=1)
    return vals.reshape(fixed.dims), float(inside.mean())


def warp_label(label: LabelMap, transform, fixed: Volume | LabelMap) -> LabelMap:
    """Inverse-mapped nearest-neighbor resampling onto the fixed grid."""
    coords = _atlas_index_coords(transform, fixed, label)
    vals = ndimage.map_coordinates(label.data, coords.T, order=0, mode="constant", cval=0)
    return LabelMap(vals.reshape(fixed.dims).astype(np.uint8), fixed.spacing, fixed.origin)


def downsample2(vol: Volume) -> Volume:
    """2x mean-pooled pyramid level; origin shifts to the pooled-voxel centers."""
    nx, ny, nz = (d - d % 2 for d in vol.dims)
    d = vol.data[:nx, :ny, :nz]
    pooled = d.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))
    spacing = tuple(2.0 * s for s in vol.spacing)
    origin = tuple(o + 0.5 * s for o, s in zip(vol.origin, vol.spacing))
    return Volume(pooled, spacing, origin)


# ---------------------------------------------------------------------------
# LC2 similarity
# ---------------------------------------------------------------------------

def _patch_scores(us_data: np.ndarray, m: np.ndarray, g: np.ndarray,
                  radius: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch explained-variance score and raw US variance weight.

    Patch centers stride over the interior so every window is fully inside.
    Fields are globally normalized before the moment filters; the score is
    invariant to affine intensity maps so this only improves conditioning.
    """
    w = 2 * radius + 1
    n = float(w**3)
    u_std = us_data.std()
    u_std = u_std if u_std > 0 else 1.0
    un = (us_data - us_data.mean()) / u_std
    m_std = m.std()
    m_std = m_std if m_std > 0 else 1.0
    mn = (m - m.mean()) / m_std
    g_std = g.std()
    g_std = g_std if g_std > 0 else 1.0
    gn = (g - g.mean()) / g_std

    def sums(fieldprod):
        return ndimage.uniform_filter(fieldprod, size=w, mode="constant") * n

    su = sums(un)
    suu = sums(un * un)
    sm = sums(mn)
    smm = sums(mn * mn)
    sg = sums(gn)
    sgg = sums(gn * gn)
    smg = sums(mn * gn)
    sum_ = sums(un * mn)
    sug = sums(un * gn)

    sl = tuple(slice(radius, dim - radius, stride) for dim in us_data.shape)
    su, suu = su[sl], suu[sl]
    sm, smm, sg, sgg, smg = sm[sl], smm[sl], sg[sl], sgg[sl], smg[sl]
    sum_, sug = sum_[sl], sug[sl]

    sst = suu - su * su / n
    amm = smm - sm * sm / n
    agg = sgg - sg * sg / n
    amg = smg - sm * sg / n
    bm = sum_ - su * sm / n
    bg = sug - su * sg / n

    det = amm * agg - amg * amg
    tiny = 1e-12 * np.maximum(amm * agg, 1e-30)
    ok = det > tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        beta_m = np.where(ok, (agg * bm - amg * bg) / det, 0.0)
        beta_g = np.where(ok, (amm * bg - amg * bm) / det, 0.0)
        ess2 = beta_m * bm + beta_g * bg
        # rank-deficient fall-back: best single regressor
        ess_m = np.where(amm > 1e-12, bm * bm / amm, 0.0)
        ess_g = np.where(agg > 1e-12, bg * bg / agg, 0.0)
        ess1 = np.maximum(ess_m, ess_g)
    ess = np.where(ok, ess2, ess1)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(sst > 0, ess / np.where(sst > 0, sst, 1.0), 0.0)
    score = np.clip(score, 0.0, 1.0)
    raw_var = sst / n * (u_std**2)
    return score.ravel(), raw_var.ravel()


def lc2_metric(us: Volume, mri: Volume, transform,
               patch_radius: int = PATCH_RADIUS_DEFAULT,
               stride: int = PATCH_STRIDE_DEFAULT,
               gradmag: Volume | None = None) -> float:
    """Variance-weighted mean patch score in [0, 1]."""
    if gradmag is None:
        gradmag = gradient_magnitude(mri)
    m, inside = warp_volume(mri, transform, us)
    if inside == 0.0:
        raise EmptyOverlapError("warped atlas does not overlap the US volume")
    g, _ = warp_volume(gradmag, transform, us)
    scores, raw_var = _patch_scores(us.data, m, g, patch_radius, stride)
    usd = us.data
    dyn = float(usd.max() - usd.min())
    floor = VARIANCE_FLOOR_FRACTION * dyn * dyn
    weights = np.where(raw_var >= floor, raw_var, 0.0)
    total = weights.sum()
    if total <= 0:
        return 0.0
    return float((scores * weights).sum() / total)


# ---------------------------------------------------------------------------
# P term
# ---------------------------------------------------------------------------

def p_term(us: Volume, warped_label: LabelMap, params: PTermParams) -> float:
    """Ventricle agreement reward over the insonated warped-label voxels.

    Voxels where the US is exactly zero lie outside the acoustic footprint
    and are not measurements; counting them would make empty background the
    most "hypoechoic" region of all and reward sliding the label off the
    brain entirely, so they are excluded from the sum and from N.
    """
    mask = (warped_label.data > 0) & (us.data != 0)
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise EmptyLabelError("warped ventricle label covers no insonated voxels")
    intensities = us.data[mask]
    labels = warped_label.data[mask]
    if np.any(labels > 1):  # lumen/plexus sub-labels present
        eps = (labels == 1).astype(np.float64)
    else:
        eps = (intensities < 0.5 * (params.i_low + params.i_high)).astype(np.float64)
    hypo = np.maximum(params.i_low - intensities, 0.0)
    hyper = np.maximum(intensities - params.i_high, 0.0)
    total = float(np.sum(eps * hypo + (1.0 - eps) * hyper))
    return (params.c1 * total + params.c2) / n


def p_adjust(p: float, label_volume: float, mean_label_volume: float) -> float:
    """Penalize small labels: P * (V_k / V_M)^(1/4)."""
    if label_volume <= 0 or mean_label_volume <= 0:
        raise ValueError("label volumes must be positive")
    return p * (label_volume / mean_label_volume) ** 0.25


# ---------------------------------------------------------------------------
# Rigid registration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidResult:
    params: RigidParams
    score: float
    n_evals: int
    init_score: float


def _rigid_composite(base: AffineMap, rigid: RigidParams, pivot: np.ndarray,
                     ffd: FreeFormDeformation | None = None) -> CompositeTransform:
    return CompositeTransform(affine=base.compose(rigid.to_affine(pivot)), ffd=ffd)


def register_rigid(us: Volume, atlas: AtlasEntry, init: RigidParams,
                   budget: int = 450, base: AffineMap | None = None,
                   pivot: np.ndarray | None = None,
                   angle_bound: float = np.radians(20.0), trans_bound: float = 20.0,
                   patch_radius: int = PATCH_RADIUS_DEFAULT,
                   stride: int = PATCH_STRIDE_DEFAULT) -> RigidResult:
    """Maximize LC2 over 6 rigid parameters, coarse-to-fine, bounded around init.

    Deterministic; the returned score is never below the score at init.
    """
    base = base or AffineMap.identity()
    if pivot is None:
        pivot = np.asarray(us.origin) + 0.5 * np.asarray(us.spacing) * (np.asarray(us.dims) - 1)
    us_coarse = downsample2(us)
    levels = [(us_coarse, int(budget * 0.6)), (us, budget - int(budget * 0.6))]

    x = init.as_vector()
    lower = x - np.asarray([angle_bound] * 3 + [trans_bound] * 3)
    upper = x + np.asarray([angle_bound] * 3 + [trans_bound] * 3)
    total_evals = 0
    for level_us, level_budget in levels:
        def objective(theta):
            params = RigidParams.from_vector(theta)
            t = _rigid_composite(base, params, pivot)
            try:
                return -lc2_metric(level_us, atlas.mri, t, patch_radius, stride, atlas.gradmag)
            except EmptyOverlapError:
                return 0.0
        result = minimize_dfo(
            objective, x, lower, upper, max_evals=level_budget,
            initial_radius=np.asarray([0.05] * 3 + [4.0] * 3),
        )
        x = result.x
        total_evals += result.n_evals

    final_params = RigidParams.from_vector(x)
    init_score = lc2_metric(us, atlas.mri, _rigid_composite(base, init, pivot),
                            patch_radius, stride, atlas.gradmag)
    final_score = lc2_metric(us, atlas.mri, _rigid_composite(base, final_params, pivot),
                             patch_radius, stride, atlas.gradmag)
    if final_score < init_score:
        final_params, final_score = init, init_score
    return RigidResult(params=final_params, score=final_score,
                       n_evals=total_evals, init_score=init_score)


# ---------------------------------------------------------------------------
# Non-rigid (free-form) registration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NonRigidResult:
    ffd: FreeFormDeformation
    score: float  # full-resolution LC2 + P_adj
    lc2: float
    p_adjusted: float
    warped_label: LabelMap
    n_evals: int


def _label_roi(label: LabelMap, margin_mm: float, fixed: Volume) -> np.ndarray:
    """Voxel-center mm points of a box around the label, padded by the margin."""
    idx = np.argwhere(label.data > 0)
    if len(idx) == 0:
        raise EmptyLabelError("rigid-stage warped label is empty")
    pad = np.ceil(margin_mm / np.asarray(fixed.spacing)).astype(int)
    lo = np.maximum(idx.min(axis=0) - pad, 0)
    hi = np.minimum(idx.max(axis=0) + pad, np.asarray(fixed.dims) - 1)
    ranges = [np.arange(lo[d], hi[d] + 1) for d in range(3)]
    ix, iy, iz = np.meshgrid(*ranges, indexing="ij")
    grid_idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
    return fixed.index_to_mm(grid_idx.astype(np.float64))


def register_nonrigid(us: Volume, atlas: AtlasEntry, rigid: RigidParams,
                      pterm: PTermParams, budget: int = 2000,
                      base: AffineMap | None = None, pivot: np.ndarray | None = None,
                      control_sweeps: tuple = ((4, 4, 4), (6, 6, 6)),
                      displacement_bound: float = 10.0,
                      mean_label_volume: float | None = None,
                      patch_radius: int = PATCH_RADIUS_DEFAULT,
                      stride: int = PATCH_STRIDE_DEFAULT) -> NonRigidResult:
    """Maximize LC2 + P_adj over control-point displacements.

    The metric is evaluated at the coarse pyramid level during optimization
    (the deformation is itself coarse); the reported score is recomputed at
    full resolution so it exactly matches lc2_metric + p_adjust(p_term).
    """
    base = base or AffineMap.identity()
    if pivot is None:
        pivot = np.asarray(us.origin) + 0.5 * np.asarray(us.spacing) * (np.asarray(us.dims) - 1)
    rigid_affine = base.compose(rigid.to_affine(pivot))

    us_coarse = downsample2(us)
    extent_lo = np.asarray(us.origin)
    extent_hi = np.asarray(us.origin) + np.asarray(us.spacing) * (np.asarray(us.dims) - 1)

    rigid_label = warp_label(atlas.ventricle_label, CompositeTransform(rigid_affine), us)
    roi_pts = _label_roi(rigid_label, displacement_bound + 4.0, us)
    voxvol = us.voxel_volume
    label_dims = atlas.ventricle_label.dims
    label_origin = np.asarray(atlas.ventricle_label.origin)
    label_spacing = np.asarray(atlas.ventricle_label.spacing)

    def label_values_at(transform) -> np.ndarray:
        mapped = transform.map_points(roi_pts)
        coords = (mapped - label_origin) / label_spacing
        return ndimage.map_coordinates(
            atlas.ventricle_label.data, coords.T, order=0, mode="constant", cval=0
        )

    us_roi_values = None  # filled lazily; fixed ROI so gather once
    roi_idx = np.round((roi_pts - np.asarray(us.origin)) / np.asarray(us.spacing)).astype(int)
    us_roi_values = us.data[roi_idx[:, 0], roi_idx[:, 1], roi_idx[:, 2]]
    mid = 0.5 * (pterm.i_low + pterm.i_high)

    def p_of(labels_roi: np.ndarray) -> tuple[float, float]:
        mask = (labels_roi > 0) & (us_roi_values != 0)
        n = int(np.count_nonzero(mask))
        if n == 0:
            return 0.0, 0.0
        vals = us_roi_values[mask]
        labs = labels_roi[mask]
        if np.any(labs > 1):
            eps = (labs == 1).astype(np.float64)
        else:
            eps = (vals < mid).astype(np.float64)
        total = float(np.sum(eps * np.maximum(pterm.i_low - vals, 0.0)
                             + (1.0 - eps) * np.maximum(vals - pterm.i_high, 0.0)))
        p = (pterm.c1 * total + pterm.c2) / n
        return p, n * voxvol

    def objective_for(ffd_template: FreeFormDeformation):
        shape = ffd_template.displacements.shape

        def objective(theta):
            ffd = replace(ffd_template, displacements=theta.reshape(shape))
            t = CompositeTransform(affine=rigid_affine, ffd=ffd)
            try:
                lc2 = lc2_metric(us_coarse, atlas.mri, t, patch_radius, stride, atlas.gradmag)
            except EmptyOverlapError:
                return 0.0
            p, vk = p_of(label_values_at(t))
            if vk <= 0:
                return -lc2
            vm = mean_label_volume if mean_label_volume else vk
            return -(lc2 + p_adjust(p, vk, vm))

        return objective

    total_evals = 0
    ffd = None
    sweeps = list(control_sweeps)
    per_sweep = max(budget // max(len(sweeps), 1), 1)
    for dims in sweeps:
        template = FreeFormDeformation.zero(dims, extent_lo, extent_hi)
        if ffd is not None:
            # seed from the previous sweep: sample its field at the new controls
            ctrl_idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
            ctrl_pts = np.asarray(template.control_origin) + ctrl_idx.reshape(-1, 3) * np.asarray(template.control_spacing)
            seed_disp = ffd.displacement_at(ctrl_pts).reshape(tuple(dims) + (3,))
            template = replace(template, displacements=seed_disp)
        x0 = template.displacements.ravel().copy()
        lower = np.full_like(x0, -displacement_bound)
        upper = np.full_like(x0, displacement_bound)
        x0 = np.clip(x0, lower, upper)
        result = minimize_dfo(objective_for(template), x0, lower, upper,
                              max_evals=per_sweep, initial_radius=2.0)
        ffd = replace(template, displacements=result.x.reshape(template.displacements.shape))
        total_evals += result.n_evals

    def full_res_result(candidate: FreeFormDeformation) -> NonRigidResult:
        t = CompositeTransform(affine=rigid_affine, ffd=candidate)
        label = warp_label(atlas.ventricle_label, t, us)
        lc2_full = lc2_metric(us, atlas.mri, t, patch_radius, stride, atlas.gradmag)
        n_label = int(np.count_nonzero(label.data))
        if n_label == 0:
            raise EmptyLabelError("deformed ventricle label left the volume")
        p_full = p_term(us, label, pterm)
        vk = n_label * voxvol
        vm = mean_label_volume if mean_label_volume else vk
        p_adj = p_adjust(p_full, vk, vm)
        return NonRigidResult(
            ffd=candidate, score=lc2_full + p_adj, lc2=lc2_full,
            p_adjusted=p_adj, warped_label=label, n_evals=total_evals,
        )

    result = full_res_result(ffd)
    # never regress below the undeformed (rigid-only) transform
    zero_ffd = FreeFormDeformation.zero(sweeps[-1], extent_lo, extent_hi)
    zero_result = full_res_result(zero_ffd)
    if zero_result.score > result.score:
        result = zero_result
    return result
