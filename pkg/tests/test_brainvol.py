import numpy as np
import pytest

from fontus.brainvol import (
    BrainVolumeParams,
    brain_volume_from_ellipsoid,
    calibrate_cf,
    detect_skull_voxels,
    estimate_brain_volume,
    estimate_centroid,
    fit_ellipsoid,
    initial_prior,
)
from fontus.ellipsoid import Ellipsoid
from fontus.errors import DegenerateGeometryError, NoSkullDetectedError
from fontus.phantom import SKULL_SHELL, PhantomSpec, generate_phantom, rasterize_ellipsoid_shell
from fontus.volume import LabelMap, Volume
from tests.conftest import cached_phantom


# ---------------------------------------------------------------------------
# Centroid heuristic
# ---------------------------------------------------------------------------

def test_centroid_65_percent_rule():
    # non-zero footprint spanning exactly z in [0, 100] mm
    data = np.zeros((11, 11, 101))
    data[5, 5, 0:101] = 1.0
    vol = Volume(data, (1.0, 1.0, 1.0))
    c = estimate_centroid(vol)
    assert c[2] == pytest.approx(65.0)


def test_centroid_single_voxel():
    data = np.zeros((8, 8, 8))
    data[2, 5, 3] = 1.0
    vol = Volume(data, (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
    c = estimate_centroid(vol)
    assert c == pytest.approx((1.0 + 4.0, 1.0 + 10.0, 1.0 + 6.0))


def test_centroid_on_phantom(noiseless_phantom):
    ph = noiseless_phantom
    c = estimate_centroid(ph.us)
    true_c = ph.truth_ellipsoid.center
    tol = 3 * max(ph.us.spacing)
    assert abs(c[0] - true_c[0]) <= tol
    assert abs(c[1] - true_c[1]) <= tol


def test_centroid_all_zero_raises():
    with pytest.raises(ValueError):
        estimate_centroid(Volume(np.zeros((4, 4, 4))))


# ---------------------------------------------------------------------------
# Skull detection
# ---------------------------------------------------------------------------

def test_detect_skull_containment_noiseless(noiseless_phantom):
    ph = noiseless_phantom
    prior = initial_prior(ph.us, estimate_centroid(ph.us))
    skull = detect_skull_voxels(ph.us, prior, BrainVolumeParams())
    idx = np.argwhere(skull.data > 0)
    pts = skull.index_to_mm(idx)
    q = ph.truth_ellipsoid.quadratic_form(pts)
    assert np.all((q > SKULL_SHELL[0] - 1e-9) & (q < SKULL_SHELL[1] + 1e-9))


def test_detect_skull_uniform_raises():
    vol = Volume(np.full((8, 8, 8), 7.0))
    prior = Ellipsoid((4.0, 4.0, 4.0), (3.0, 3.0, 3.0))
    with pytest.raises(NoSkullDetectedError):
        detect_skull_voxels(vol, prior, BrainVolumeParams())


def test_detect_skull_shell_monotonicity(default_phantom):
    ph = default_phantom
    prior = initial_prior(ph.us, estimate_centroid(ph.us))
    wide = detect_skull_voxels(ph.us, prior, BrainVolumeParams())
    narrow = detect_skull_voxels(
        ph.us, prior, BrainVolumeParams(shell_lo=0.99, shell_hi=1.01)
    )
    assert narrow.data.sum() < wide.data.sum()
    assert np.all(wide.data[narrow.data > 0] > 0)  # subset


# ---------------------------------------------------------------------------
# Ellipsoid fit
# ---------------------------------------------------------------------------

def _shell_label(axes, rotation=None, dims=(64, 64, 64)):
    center = tuple(d / 2.0 for d in dims)
    e = Ellipsoid(center, axes, rotation if rotation is not None else np.eye(3))
    return rasterize_ellipsoid_shell(e, 0.97, 1.03, dims, (1.0, 1.0, 1.0)), e


def test_fit_sphere_shell():
    lab, truth = _shell_label((20.0, 20.0, 20.0))
    fitted, rms = fit_ellipsoid(lab)
    assert np.allclose(sorted(fitted.semi_axes), [20.0] * 3, rtol=0.02)
    assert rms < 0.05


def test_fit_anisotropic_shell():
    lab, truth = _shell_label((30.0, 25.0, 20.0), dims=(72, 72, 72))
    fitted, _ = fit_ellipsoid(lab)
    assert sorted(fitted.semi_axes, reverse=True) == pytest.approx([30.0, 25.0, 20.0], rel=0.02)


def test_fit_rotation_equivariance():
    angle = np.radians(30.0)
    rot = np.array(
        [[np.cos(angle), -np.sin(angle), 0.0],
         [np.sin(angle), np.cos(angle), 0.0],
         [0.0, 0.0, 1.0]]
    )
    lab_r, truth_r = _shell_label((30.0, 22.0, 18.0), rotation=rot, dims=(80, 80, 80))
    fitted, rms = fit_ellipsoid(lab_r)
    # residuals in the fitted frame match the unrotated fit quality
    lab_i, _ = _shell_label((30.0, 22.0, 18.0), dims=(80, 80, 80))
    _, rms_i = fit_ellipsoid(lab_i)
    assert abs(rms - rms_i) < 5e-3
    assert sorted(fitted.semi_axes, reverse=True) == pytest.approx([30.0, 22.0, 18.0], rel=0.02)


def test_fit_requires_enough_voxels():
    lab = LabelMap(np.zeros((8, 8, 8), dtype=np.uint8))
    with pytest.raises(DegenerateGeometryError):
        fit_ellipsoid(lab)


def test_fit_degenerate_plane_raises():
    data = np.zeros((16, 16, 16), dtype=np.uint8)
    data[:, :, 8] = 1  # rank-2 cloud
    with pytest.raises(DegenerateGeometryError):
        fit_ellipsoid(LabelMap(data))


# ---------------------------------------------------------------------------
# Volume formula + calibration
# ---------------------------------------------------------------------------

def test_brain_volume_unit_sphere():
    e = Ellipsoid((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    v = brain_volume_from_ellipsoid(e, BrainVolumeParams(cf=1.0))
    assert v == pytest.approx(4.0 * np.pi / 3.0)


def test_brain_volume_default_cf_and_product():
    params = BrainVolumeParams()
    assert params.cf == 0.95
    e = Ellipsoid((0.0, 0.0, 0.0), (60.0, 50.0, 45.0))
    v = brain_volume_from_ellipsoid(e, params)
    assert v == pytest.approx(0.95 * (4.0 / 3.0) * np.pi * 60 * 50 * 45)


def test_brain_volume_linear_in_cf():
    e = Ellipsoid((0.0, 0.0, 0.0), (10.0, 11.0, 12.0))
    v1 = brain_volume_from_ellipsoid(e, BrainVolumeParams(cf=0.5))
    v2 = brain_volume_from_ellipsoid(e, BrainVolumeParams(cf=1.0))
    assert v2 == pytest.approx(2.0 * v1)


def test_calibrate_cf_consistent_pairs():
    es = [Ellipsoid((0, 0, 0), (30 + i, 28.0, 26.0)) for i in range(4)]
    pairs = [(e, 0.95 * e.volume) for e in es]
    cal = calibrate_cf(pairs)
    assert cal.cf == pytest.approx(0.95)
    assert cal.loo_mean_abs_rel_error == pytest.approx(0.0, abs=1e-12)


def test_calibrate_cf_two_ratio_closed_form():
    e1 = Ellipsoid((0, 0, 0), (30.0, 28.0, 26.0))
    e2 = Ellipsoid((0, 0, 0), (32.0, 30.0, 25.0))
    e3 = Ellipsoid((0, 0, 0), (29.0, 27.0, 24.0))
    pairs = [(e1, 0.9 * e1.volume), (e2, 1.0 * e2.volume), (e3, 0.95 * e3.volume)]
    cal = calibrate_cf(pairs)
    assert cal.cf == pytest.approx((0.9 + 1.0 + 0.95) / 3.0)
    # leave pair 1 out: cf = .975 predicts .975/.9 - 1 relative error
    assert cal.per_pair_errors[0] == pytest.approx(abs(0.975 / 0.9 - 1.0))
    assert cal.per_pair_errors[1] == pytest.approx(abs(0.925 / 1.0 - 1.0))


def test_calibrate_cf_needs_three():
    e = Ellipsoid((0, 0, 0), (30.0, 28.0, 26.0))
    with pytest.raises(ValueError):
        calibrate_cf([(e, e.volume), (e, e.volume)])


# ---------------------------------------------------------------------------
# Whole-procedure pipeline properties
# ---------------------------------------------------------------------------

def test_noiseless_phantom_volume_error(noiseless_phantom):
    ph = noiseless_phantom
    est = estimate_brain_volume(ph.us)
    err = abs(est.volume_mm3 - ph.truth_brain_volume) / ph.truth_brain_volume
    assert err <= 0.05


def test_speckled_phantom_volume_error(default_phantom):
    ph = default_phantom
    est = estimate_brain_volume(ph.us)
    err = abs(est.volume_mm3 - ph.truth_brain_volume) / ph.truth_brain_volume
    assert err <= 0.08
