"""Ellipsoid geometry shared by the phantom generator and the brain-volume fit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Ellipsoid:
    """center (mm), semi_axes (a, b, c) in mm, and an orthonormal rotation.

    Rows of ``rotation`` are the ellipsoid axes expressed in world coordinates,
    so local coordinates of a world point p are ``rotation @ (p - center)``.
    """

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        axes = tuple(float(a) for a in self.semi_axes)
        if any(a <= 0 for a in axes):
            raise ValueError(f"semi-axes must be positive, got {axes}")
        object.__setattr__(self, "semi_axes", axes)
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be a 3x3 orthonormal matrix")
        rot = np.ascontiguousarray(rot)
        rot.flags.writeable = False
        object.__setattr__(self, "rotation", rot)

    @property
    def volume(self) -> float:
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * np.pi * a * b * c

    def quadratic_form(self, points_mm: np.ndarray) -> np.ndarray:
        """Normalized quadratic form: sum((local_i / axis_i)^2); 1 on the surface."""
        pts = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
        local = (pts - np.asarray(self.center)) @ self.rotation.T
        q = np.sum((local / np.asarray(self.semi_axes)) ** 2, axis=1)
        if np.asarray(points_mm).ndim == 1:
            return q[0]
        return q

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "semi_axes": list(self.semi_axes),
            "rotation": self.rotation.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Ellipsoid":
        return Ellipsoid(tuple(d["center"]), tuple(d["semi_axes"]), np.asarray(d["rotation"]))


def grid_points_mm(dims, spacing, origin) -> np.ndarray:
    """All voxel-center positions of a grid, shape (nx*ny*nz, 3), x fastest."""
    nx, ny, nz = dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
    return np.asarray(origin) + idx * np.asarray(spacing)


def quadratic_form_grid(e: Ellipsoid, dims, spacing, origin) -> np.ndarray:
    """Quadratic form of every voxel center, returned as a (nx, ny, nz) array."""
    nx, ny, nz = dims
    sx, sy, sz = spacing
    ox, oy, oz = origin
    xs = (ox + sx * np.arange(nx) - e.center[0])
    ys = (oy + sy * np.arange(ny) - e.center[1])
    zs = (oz + sz * np.arange(nz) - e.center[2])
    rot = e.rotation
    ax = np.asarray(e.semi_axes)
    # local coordinate l_k = R[k,0]*dx + R[k,1]*dy + R[k,2]*dz, separable per axis
    q = np.zeros((nx, ny, nz))
    for k in range(3):
        lk = (
            rot[k, 0] * xs[:, None, None]
            + rot[k, 1] * ys[None, :, None]
            + rot[k, 2] * zs[None, None, :]
        )
        q += (lk / ax[k]) ** 2
    return q
