"""Synthetic paired pseudo-US / pseudo-MRI head phantoms with ground truth.

The generator builds an ellipsoidal head with a bright skull shell, two
lateral ventricles (dark lumen + bright plexus), a cone-shaped acoustic
footprint for the US half, and a full-head piecewise-constant MRI half.
Everything is a pure, seeded function of the spec, so phantoms double as
registration atlases and as ground truth for the whole pipeline.

Intensity anchors (US): lumen 60, tissue 100, plexus 140, skull band
170-240, deep echo 90. These keep the default P-term windows (85/115 at
mean 100) separating lumen from plexus with ~25 units of margin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .ellipsoid import Ellipsoid, quadratic_form_grid
from .volume import LabelMap, Volume

# US intensity anchors
US_LUMEN = 60.0
US_TISSUE = 100.0
US_PLEXUS = 140.0
US_SKULL_LO = 170.0
US_SKULL_HI = 240.0
US_BASE = 96.0  # keeps the non-zero mean near 100 so the default P windows center well

# MRI intensity anchors (different tissue mapping, same geometry)
MRI_BACKGROUND = 15.0
MRI_TISSUE = 120.0
MRI_LUMEN = 40.0
MRI_PLEXUS = 160.0
MRI_SKULL = 55.0
MRI_NOISE_SIGMA = 3.0

SKULL_SHELL = (0.97, 1.07)  # quadratic-form band of the bright skull echo
CONE_HALF_ANGLE_DEG = 65.0
CONE_APEX_OFFSET = 10.0  # mm above the skull top; close enough to keep a cone footprint,
                         # far enough that the whole shell is insonated
BRAIN_FRACTION = 0.95  # generator's own C_f: brain = ellipsoid minus bottom cap

LUMEN_LABEL = 1
PLEXUS_LABEL = 2


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    dims: tuple[int, int, int] = (96, 96, 112)
    spacing: tuple[float, float, float] = (1.25, 1.25, 1.25)
    semi_axes_range: tuple[float, float] = (36.0, 42.0)  # nominal head radius, mm
    ventricle_scale: float = 1.0
    ventricle_dilation: float = 1.0
    speckle: float = 0.15
    shadow_strength: float = 0.25
    rotation: np.ndarray | None = field(default=None)  # optional head rotation

    def __post_init__(self):
        if self.ventricle_dilation < 1.0:
            raise ValueError("ventricle dilation factor must be >= 1")
        if self.ventricle_scale <= 0:
            raise ValueError("ventricle scale must be positive")
        if self.semi_axes_range[0] > self.semi_axes_range[1]:
            raise ValueError("semi-axes range must be (lo, hi)")
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=np.float64)
            if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
                raise ValueError("rotation must be 3x3 orthonormal")
            rot = np.ascontiguousarray(rot)
            rot.flags.writeable = False
            object.__setattr__(self, "rotation", rot)


@dataclass(frozen=True)
class Phantom:
    us: Volume
    mri: Volume
    truth_ventricles: LabelMap  # LUMEN_LABEL / PLEXUS_LABEL
    truth_brain: LabelMap
    truth_ellipsoid: Ellipsoid
    truth_brain_volume: float  # mm^3, voxel count x voxel volume

    @property
    def truth_ventricle_volume(self) -> float:
        return float(np.count_nonzero(self.truth_ventricles.data)) * self.truth_ventricles.voxel_volume


def _cap_cut_level(fraction_removed: float) -> float:
    """Level s in (-1, 0) cutting off ``fraction_removed`` of a unit ball from below."""
    if fraction_removed <= 0:
        return -1.0
    return brentq(lambda s: (2.0 + 3.0 * s - s**3) / 4.0 - fraction_removed, -1.0, 0.0)


def rasterize_ellipsoid_shell(e: Ellipsoid, inner: float, outer: float, dims, spacing, origin=(0.0, 0.0, 0.0)) -> LabelMap:
    """Label voxels whose normalized quadratic form lies strictly in (inner, outer)."""
    if inner > outer:
        raise ValueError("inner must not exceed outer")
    q = quadratic_form_grid(e, dims, spacing, origin)
    lab = ((q > inner) & (q < outer)).astype(np.uint8)
    return LabelMap(lab, spacing, origin)


def _ventricle_geometry(head: Ellipsoid, scale: float, dilation: float, jitter: np.ndarray):
    """The two lateral ventricle ellipsoids and their plexus sub-ellipsoids."""
    a, b, c = head.semi_axes
    to_world = head.rotation.T  # local offsets -> world
    vents, plexi = [], []
    factor = scale * dilation
    for i, sgn in enumerate((-1.0, 1.0)):
        jit = 1.0 + 0.05 * jitter[i]
        axes = (0.115 * a * factor * jit, 0.34 * b * factor * jit, 0.16 * c * factor * jit)
        offset = to_world @ np.asarray([sgn * 0.30 * a, -0.05 * b, 0.10 * c])
        center = tuple(np.asarray(head.center) + offset)
        vent = Ellipsoid(center, axes, head.rotation)
        paxes = (0.55 * axes[0], 0.42 * axes[1], 0.55 * axes[2])
        pcenter = tuple(np.asarray(center) + to_world @ np.asarray([0.0, -0.38 * axes[1], 0.0]))
        plexi.append(Ellipsoid(pcenter, paxes, head.rotation))
        vents.append(vent)
    return vents, plexi


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Deterministically build a phantom from its spec."""
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    spacing = tuple(float(s) for s in spec.spacing)
    origin = (0.0, 0.0, 0.0)
    extent = np.asarray(dims) * np.asarray(spacing)

    # head geometry: lateral a, anterior-posterior b (longest), vertical c (shortest)
    lo, hi = spec.semi_axes_range
    r = rng.uniform(lo, hi)
    a = 0.82 * r * rng.uniform(0.96, 1.04)
    b = 1.00 * r * rng.uniform(0.96, 1.04)
    c = 0.74 * r * rng.uniform(0.96, 1.04)
    shell_top = np.sqrt(SKULL_SHELL[1])
    cz = (0.65 * shell_top / 0.35) * c  # places the 65% height level at the brain center
    center = (extent[0] / 2.0, extent[1] / 2.0, cz)
    rotation = np.eye(3) if spec.rotation is None else spec.rotation
    head = Ellipsoid(center, (a, b, c), rotation)

    margin = 2.0 * max(spacing)
    if (
        cz + shell_top * c + margin > extent[2]
        or center[0] - shell_top * a < margin
        or center[0] + shell_top * a + margin > extent[0]
        or center[1] - shell_top * b < margin
        or center[1] + shell_top * b + margin > extent[1]
    ):
        raise ValueError("head ellipsoid does not fit inside the grid with 2-voxel margin")

    vent_jitter = rng.uniform(-1.0, 1.0, size=2)
    vents, plexi = _ventricle_geometry(head, spec.ventricle_scale, spec.ventricle_dilation, vent_jitter)

    q_head = quadratic_form_grid(head, dims, spacing, origin)
    q_vents = [quadratic_form_grid(v, dims, spacing, origin) for v in vents]
    q_plexi = [quadratic_form_grid(p, dims, spacing, origin) for p in plexi]

    inside_brain_ell = q_head <= 1.0
    skull_band = (q_head > SKULL_SHELL[0]) & (q_head < SKULL_SHELL[1])
    vent_mask = (q_vents[0] <= 1.0) | (q_vents[1] <= 1.0)
    plexus_mask = ((q_plexi[0] <= 1.0) | (q_plexi[1] <= 1.0)) & vent_mask
    lumen_mask = vent_mask & ~plexus_mask

    # head-frame vertical (rows of the rotation are the head axes in world coords)
    up = rotation[2]

    # voxel offsets from the head center, projected on the head axis
    ix = origin[0] + spacing[0] * np.arange(dims[0])
    iy = origin[1] + spacing[1] * np.arange(dims[1])
    zs = origin[2] + spacing[2] * np.arange(dims[2])
    px = ix[:, None, None] - center[0]
    py = iy[None, :, None] - center[1]
    pz = zs[None, None, :] - center[2]
    axial_from_center = up[0] * px + up[1] * py + up[2] * pz  # head-frame height

    # ground-truth brain: ellipsoid minus the bottom cap (generator's brain fraction)
    s_cut = _cap_cut_level(1.0 - BRAIN_FRACTION)
    truth_brain_mask = inside_brain_ell & (axial_from_center >= s_cut * c)
    truth_vent_data = np.zeros(dims, dtype=np.uint8)
    truth_vent_data[lumen_mask & truth_brain_mask] = LUMEN_LABEL
    truth_vent_data[plexus_mask & truth_brain_mask] = PLEXUS_LABEL

    # acoustic cone from the virtual fontanelle, rigidly attached to the head
    apex = np.asarray(center) + (c + CONE_APEX_OFFSET) * up
    wx = ix[:, None, None] - apex[0]
    wy = iy[None, :, None] - apex[1]
    wz = zs[None, None, :] - apex[2]
    axial = -(up[0] * wx + up[1] * wy + up[2] * wz)  # depth below the apex
    radial = np.sqrt(
        np.maximum((wx * wx + wy * wy + wz * wz) - axial * axial, 0.0)
    )
    tan_half = np.tan(np.radians(CONE_HALF_ANGLE_DEG))
    cone = (axial > 0) & (radial <= axial * tan_half)

    # US composition
    us = np.zeros(dims)
    us[inside_brain_ell & (q_head < SKULL_SHELL[0])] = US_TISSUE
    us[lumen_mask] = US_LUMEN
    us[plexus_mask] = US_PLEXUS
    skull_tex = US_SKULL_LO + (US_SKULL_HI - US_SKULL_LO) * rng.random(dims)
    us[skull_band] = skull_tex[skull_band]
    base_mask = cone & (q_head >= SKULL_SHELL[1]) & (axial_from_center < -shell_top * c)
    us[base_mask] = US_BASE

    if spec.speckle > 0:
        speckle = 1.0 + spec.speckle * (2.0 * rng.random(dims) - 1.0)
        us *= speckle
    if spec.shadow_strength > 0:
        with np.errstate(invalid="ignore", divide="ignore"):
            sin_angle = np.where(axial > 0, radial / np.sqrt(radial * radial + axial * axial), 1.0)
        rel = np.clip(sin_angle / np.sin(np.radians(CONE_HALF_ANGLE_DEG)), 0.0, 1.0)
        us *= 1.0 - spec.shadow_strength * rel**6
    us[~cone] = 0.0
    us = np.clip(us, 0.0, 255.0)

    # MRI composition (full head, Gaussian noise)
    mri = np.full(dims, MRI_BACKGROUND)
    mri[inside_brain_ell & (q_head < SKULL_SHELL[0])] = MRI_TISSUE
    mri[lumen_mask] = MRI_LUMEN
    mri[plexus_mask] = MRI_PLEXUS
    mri[skull_band] = MRI_SKULL
    mri = mri + MRI_NOISE_SIGMA * rng.standard_normal(dims)
    mri = np.clip(mri, 0.0, 255.0)

    truth_brain = LabelMap(truth_brain_mask.astype(np.uint8), spacing, origin)
    truth_vents = LabelMap(truth_vent_data, spacing, origin)
    brain_volume = float(np.count_nonzero(truth_brain_mask)) * float(np.prod(spacing))

    return Phantom(
        us=Volume(us, spacing, origin),
        mri=Volume(mri, spacing, origin),
        truth_ventricles=truth_vents,
        truth_brain=truth_brain,
        truth_ellipsoid=head,
        truth_brain_volume=brain_volume,
    )


def atlas_bank_specs(
    base_seed: int,
    count: int = 11,
    dims=(96, 96, 112),
    spacing=(1.25, 1.25, 1.25),
    semi_axes_range=(36.0, 42.0),
    scale_range=(0.8, 1.25),
) -> list[PhantomSpec]:
    """Specs for a bank of atlases with varied head sizes and ventricle scales."""
    rng = np.random.default_rng(base_seed)
    specs = []
    for i in range(count):
        scale = float(rng.uniform(*scale_range))
        specs.append(
            PhantomSpec(
                seed=base_seed + 1000 + i,
                dims=tuple(dims),
                spacing=tuple(spacing),
                semi_axes_range=tuple(semi_axes_range),
                ventricle_scale=scale,
            )
        )
    return specs
