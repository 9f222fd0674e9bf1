"""Registration initialization: PCA orientation and the similarity prior.

The orientation corrects the US volume's head pose toward the canonical
atlas frame (x lateral, y anterior-posterior, z toward the fontanelle) from
the inferior half of the detected skull. The similarity prior maps an atlas
brain ellipsoid onto the subject's with per-axis scaling and a translation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ellipsoid import Ellipsoid, quadratic_form_grid
from .errors import DegenerateGeometryError
from .volume import LabelMap, Volume, intensity_percentile


def orientation_skull_label(us: Volume, prior: Ellipsoid,
                            shell_lo: float = 0.8, shell_hi: float = 1.3) -> LabelMap:
    """A dense skull sample for orientation estimation.

    The 98th-percentile skull set is pure but a random subset of the shell,
    which makes moment-based axes angularly noisy; here the threshold drops
    to the midpoint between the 98th percentile and the mean of the non-zero
    intensities, which still clears tissue and deep echo but keeps the shell
    nearly complete.
    """
    i98 = intensity_percentile(us, 98.0, nonzero_only=True)
    nz = us.data[us.data != 0]
    if nz.size == 0:
        raise DegenerateGeometryError("empty US volume")
    threshold = 0.5 * (i98 + float(nz.mean()))
    q = quadratic_form_grid(prior, us.dims, us.spacing, us.origin)
    mask = (us.data > threshold) & (q > shell_lo) & (q < shell_hi)
    if not mask.any():
        raise DegenerateGeometryError("no voxels for the orientation skull sample")
    return LabelMap(mask.astype(np.uint8), us.spacing, us.origin)


def _pca(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-9 * max(evals[-1], 1e-12):
        raise DegenerateGeometryError("rank-deficient point cloud")
    return evals, evecs


def orient_by_pca(us: Volume, skull: LabelMap, centroid: tuple[float, float, float] | None = None) -> np.ndarray:
    """Rotation (3x3, rows = canonical axes in world coordinates) from the
    inferior skull point cloud.

    The probe (vertical) direction is first taken from the full skull
    cloud's smallest principal axis, signed toward the probe side (the deep
    echoes pull the footprint's center of mass away from it); "inferior" is
    the half below the skull mean along that direction. The returned axes
    come from the inferior cloud's PCA: largest variance -> anterior-
    posterior, smallest -> vertical. Signs: vertical toward the probe, AP
    toward the grid +y (the mirror branch of a symmetric head cannot be
    decided from geometry), lateral completes a right-handed frame.
    """
    del centroid  # estimation is covariant; kept for call-site convenience
    idx = np.argwhere(skull.data > 0)
    if len(idx) == 0:
        raise DegenerateGeometryError("empty skull label")
    points = skull.index_to_mm(idx)
    skull_mean = points.mean(axis=0)

    nz = np.argwhere(us.data != 0)
    footprint_mean = us.index_to_mm(nz.astype(np.float64)).mean(axis=0)
    toward_probe = skull_mean - footprint_mean
    if np.linalg.norm(toward_probe) < 1e-9:
        toward_probe = np.asarray([0.0, 0.0, 1.0])

    _, evecs_full = _pca(points)
    up = evecs_full[:, 0]
    if np.dot(up, toward_probe) < 0:
        up = -up

    height = (points - skull_mean) @ up
    inferior = points[height < 0]
    if len(inferior) < 10:
        raise DegenerateGeometryError("inferior skull region nearly empty")

    evals, evecs = _pca(inferior)
    order = np.argsort(evals)[::-1]
    e_ap = evecs[:, order[0]]
    e_vert = evecs[:, order[2]]
    if np.dot(e_vert, up) < 0:
        e_vert = -e_vert
    if e_ap[1] < 0:
        e_ap = -e_ap
    e_lat = np.cross(e_ap, e_vert)
    norm = np.linalg.norm(e_lat)
    if norm < 1e-9:
        raise DegenerateGeometryError("degenerate principal axes")
    e_lat /= norm
    e_ap = np.cross(e_vert, e_lat)
    e_ap /= np.linalg.norm(e_ap)
    return np.stack([e_lat, e_ap, e_vert], axis=0)


@dataclass(frozen=True)
class SimilarityPrior:
    """Per-axis scale and translation mapping atlas coordinates to subject ones."""

    scale: tuple[float, float, float]
    translation: tuple[float, float, float]

    def apply(self, points_mm: np.ndarray) -> np.ndarray:
        return np.asarray(points_mm) * np.asarray(self.scale) + np.asarray(self.translation)

    def invert(self, points_mm: np.ndarray) -> np.ndarray:
        return (np.asarray(points_mm) - np.asarray(self.translation)) / np.asarray(self.scale)


def prior_similarity_transform(subject: Ellipsoid, atlas: Ellipsoid) -> SimilarityPrior:
    """Scale = subject axis / atlas axis per axis; translation matches centers."""
    scale = tuple(s / a for s, a in zip(subject.semi_axes, atlas.semi_axes))
    translation = tuple(
        sc - sl * ac for sc, sl, ac in zip(subject.center, scale, atlas.center)
    )
    return SimilarityPrior(scale=scale, translation=translation)
