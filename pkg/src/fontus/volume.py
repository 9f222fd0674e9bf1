"""3D scalar grids: the image and label containers shared by every stage.

Conventions used throughout the package:

* arrays are indexed ``data[x, y, z]`` (x fastest in the flat file layout),
* ``spacing`` and ``origin`` are in millimetres,
* a voxel index ``(i, j, k)`` sits at ``origin + index * spacing`` (mm),
* volumes are immutable after construction and safe to share.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Triple = tuple[float, float, float]


def _as_triple(v) -> tuple:
    t = tuple(v)
    if len(t) != 3:
        raise ValueError(f"expected a length-3 sequence, got {v!r}")
    return t


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with physical spacing and origin."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        spacing = _as_triple(self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in _as_triple(self.origin)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def index_to_mm(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def mm_to_index(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def same_grid(self, other: "Volume | LabelMap") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


@dataclass(frozen=True)
class LabelMap:
    """An integer label grid aligned to a :class:`Volume` geometry.

    ``probability`` is an optional channel in [0, 1] (e.g. STAPLE output).
    """

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    probability: np.ndarray | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if np.issubdtype(data.dtype, np.floating):
            if not np.allclose(data, np.round(data)):
                raise ValueError("label data must be integer-valued")
        data = np.ascontiguousarray(data.astype(np.uint8))
        if data.min() < 0:
            raise ValueError("label values must be non-negative")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        spacing = _as_triple(self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in _as_triple(self.origin)))
        if self.probability is not None:
            prob = np.ascontiguousarray(np.asarray(self.probability, dtype=np.float64))
            if prob.shape != data.shape:
                raise ValueError("probability channel shape mismatch")
            if prob.min() < 0.0 or prob.max() > 1.0:
                raise ValueError("probability channel must lie in [0, 1]")
            prob.flags.writeable = False
            object.__setattr__(self, "probability", prob)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def foreground(self) -> np.ndarray:
        return self.data > 0

    def same_grid(self, other: "Volume | LabelMap") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )

    def index_to_mm(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def mm_to_index(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)


def trilinear_sample(vol: Volume, points_mm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample a volume at continuous mm points with trilinear interpolation.

    Out-of-bounds points return 0; the second return value flags them.
    Accepts a single point (3,) or an array (N, 3).
    """
    pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
    idx = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    nx, ny, nz = vol.dims
    oob = (
        (idx[:, 0] < 0) | (idx[:, 0] > nx - 1)
        | (idx[:, 1] < 0) | (idx[:, 1] > ny - 1)
        | (idx[:, 2] < 0) | (idx[:, 2] > nz - 1)
    )
    safe = np.clip(idx, 0.0, np.asarray([nx - 1, ny - 1, nz - 1], dtype=np.float64))
    base = np.floor(safe).astype(np.intp)
    base = np.minimum(base, np.asarray([nx - 2, ny - 2, nz - 2]).clip(min=0))
    frac = safe - base
    d = vol.data
    x0, y0, z0 = base[:, 0], base[:, 1], base[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    out = (
        d[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + d[x1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + d[x0, y1, z0] * (1 - fx) * fy * (1 - fz)
        + d[x0, y0, z1] * (1 - fx) * (1 - fy) * fz
        + d[x1, y1, z0] * fx * fy * (1 - fz)
        + d[x1, y0, z1] * fx * (1 - fy) * fz
        + d[x0, y1, z1] * (1 - fx) * fy * fz
        + d[x1, y1, z1] * fx * fy * fz
    )
    out[oob] = 0.0
    if np.asarray(points_mm).ndim == 1:
        return out[0], oob[0]
    return out, oob


def gradient_magnitude(vol: Volume) -> Volume:
    """Spacing-scaled central-difference gradient magnitude.

    One-sided differences at the boundary faces.
    """
    if min(vol.dims) < 2:
        raise ValueError("gradient needs at least 2 samples per axis")
    gx, gy, gz = np.gradient(vol.data, *vol.spacing)
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    return Volume(mag, vol.spacing, vol.origin)


def intensity_percentile(vol: Volume, q: float, nonzero_only: bool = False) -> float:
    """Nearest-rank percentile of the voxel intensities.

    With ``nonzero_only`` the rank is taken over strictly non-zero voxels.
    """
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {q}")
    values = vol.data.ravel()
    if nonzero_only:
        values = values[values != 0]
    if values.size == 0:
        raise ValueError("no voxels to take a percentile over")
    ordered = np.sort(values)
    # nearest-rank: smallest value with cumulative fraction >= q/100
    rank = int(np.ceil(q / 100.0 * ordered.size))
    rank = max(rank, 1)
    return float(ordered[rank - 1])
