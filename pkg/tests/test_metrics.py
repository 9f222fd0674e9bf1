import numpy as np
import pytest

from fontus.errors import EmptyLabelError, GridMismatchError
from fontus.metrics import (
    boundary_voxels,
    dice,
    hausdorff,
    label_volume,
    mean_absolute_surface_distance,
    pearson_r,
    ventricle_brain_ratio,
)
from fontus.volume import LabelMap


def _lab(data, spacing=(1.0, 1.0, 1.0)):
    return LabelMap(np.asarray(data, dtype=np.uint8), spacing)


def _bruteforce_boundary(data):
    data = np.asarray(data) > 0
    out = []
    for idx in np.argwhere(data):
        for d in range(3):
            for s in (-1, 1):
                n = idx.copy()
                n[d] += s
                if (n < 0).any() or (n >= np.asarray(data.shape)).any() or not data[tuple(n)]:
                    out.append(idx)
                    break
            else:
                continue
            break
    return np.asarray(out).reshape(-1, 3)


def _bruteforce_distances(a, b, spacing):
    pa = _bruteforce_boundary(a) * np.asarray(spacing)
    pb = _bruteforce_boundary(b) * np.asarray(spacing)
    d_ab = np.array([np.min(np.linalg.norm(pb - p, axis=1)) for p in pa])
    d_ba = np.array([np.min(np.linalg.norm(pa - p, axis=1)) for p in pb])
    return d_ab, d_ba


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def test_dice_identical():
    rng = np.random.default_rng(0)
    lab = _lab(rng.integers(0, 2, (6, 6, 6)))
    assert dice(lab, lab) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4, 4)); a[0, 0, 0] = 1
    b = np.zeros((4, 4, 4)); b[3, 3, 3] = 1
    assert dice(_lab(a), _lab(b)) == 0.0


def test_dice_both_empty_is_one():
    z = _lab(np.zeros((3, 3, 3)))
    assert dice(z, z) == 1.0


def test_dice_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.integers(0, 2, (8, 8, 8))
        b = rng.integers(0, 2, (8, 8, 8))
        inter = int(((a > 0) & (b > 0)).sum())
        expect = 1.0 if (a.sum() + b.sum()) == 0 else 2.0 * inter / (int(a.sum()) + int(b.sum()))
        assert dice(_lab(a), _lab(b)) == expect


def test_dice_grid_mismatch():
    with pytest.raises(GridMismatchError):
        dice(_lab(np.zeros((3, 3, 3))), _lab(np.zeros((3, 3, 3)), spacing=(2, 1, 1)))


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------

def test_mad_identical_zero():
    rng = np.random.default_rng(2)
    lab = _lab(rng.integers(0, 2, (6, 6, 6)))
    assert mean_absolute_surface_distance(lab, lab) == 0.0


def test_mad_parallel_slabs():
    a = np.zeros((8, 5, 5)); a[0, :, :] = 1
    b = np.zeros((8, 5, 5)); b[3, :, :] = 1
    assert mean_absolute_surface_distance(_lab(a), _lab(b)) == pytest.approx(3.0)


def test_mad_symmetric():
    rng = np.random.default_rng(3)
    a = _lab(rng.integers(0, 2, (7, 7, 7)))
    b = _lab(rng.integers(0, 2, (7, 7, 7)))
    assert mean_absolute_surface_distance(a, b) == mean_absolute_surface_distance(b, a)


def test_hausdorff_identical_zero():
    lab = _lab(np.pad(np.ones((2, 2, 2)), 1))
    assert hausdorff(lab, lab) == 0.0


def test_hausdorff_two_points():
    a = np.zeros((8, 3, 3)); a[1, 1, 1] = 1
    b = np.zeros((8, 3, 3)); b[6, 1, 1] = 1
    assert hausdorff(_lab(a), _lab(b)) == pytest.approx(5.0)


def test_distance_metrics_match_bruteforce_oracles():
    rng = np.random.default_rng(4)
    spacing = (1.0, 1.3, 0.8)
    for _ in range(10):
        a = rng.integers(0, 2, (8, 8, 8))
        b = rng.integers(0, 2, (8, 8, 8))
        if a.sum() == 0 or b.sum() == 0:
            continue
        la, lb = _lab(a, spacing), _lab(b, spacing)
        d_ab, d_ba = _bruteforce_distances(a, b, spacing)
        assert mean_absolute_surface_distance(la, lb) == pytest.approx(
            0.5 * (d_ab.mean() + d_ba.mean()), abs=1e-12
        )
        assert hausdorff(la, lb) == pytest.approx(max(d_ab.max(), d_ba.max()), abs=1e-12)


def test_hausdorff_at_least_mad():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.integers(0, 2, (8, 8, 8))
        b = rng.integers(0, 2, (8, 8, 8))
        if a.sum() == 0 or b.sum() == 0:
            continue
        la, lb = _lab(a), _lab(b)
        assert hausdorff(la, lb) >= mean_absolute_surface_distance(la, lb) >= 0.0


def test_empty_label_raises():
    a = _lab(np.zeros((4, 4, 4)))
    b = _lab(np.ones((4, 4, 4)))
    with pytest.raises(EmptyLabelError):
        mean_absolute_surface_distance(a, b)
    with pytest.raises(EmptyLabelError):
        hausdorff(a, b)


def test_boundary_of_solid_block():
    data = np.zeros((6, 6, 6))
    data[1:5, 1:5, 1:5] = 1
    boundary = boundary_voxels(_lab(data))
    # a 4^3 block has 4^3 - 2^3 boundary voxels
    assert len(boundary) == 64 - 8


# ---------------------------------------------------------------------------
# Volumes, correlation, ratio
# ---------------------------------------------------------------------------

def test_label_volume_empty_and_counted():
    assert label_volume(_lab(np.zeros((3, 3, 3)))) == 0.0
    data = np.zeros((5, 5, 5)); data.ravel()[:10] = 1
    assert label_volume(_lab(data, (1.0, 1.0, 1.2))) == pytest.approx(12.0)


def test_label_volume_matches_phantom_truth(default_phantom):
    ph = default_phantom
    vol = label_volume(ph.truth_brain)
    assert vol == pytest.approx(ph.truth_brain_volume, rel=0.005)


def test_pearson_perfect_lines():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert pearson_r(x, [2 * v + 1 for v in x]) == pytest.approx(1.0)
    assert pearson_r(x, [-v for v in x]) == pytest.approx(-1.0)


def test_pearson_matches_two_pass_oracle():
    x = np.array([0.3, 1.7, 2.9, 4.1, 8.2])
    y = np.array([1.2, 0.7, 3.3, 3.9, 7.6])
    mx, my = x.mean(), y.mean()
    expect = ((x - mx) * (y - my)).sum() / np.sqrt(((x - mx) ** 2).sum() * ((y - my) ** 2).sum())
    assert abs(pearson_r(x, y) - expect) < 1e-12


def test_pearson_errors():
    with pytest.raises(ValueError):
        pearson_r([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_ventricle_brain_ratio():
    assert ventricle_brain_ratio(6000.0, 750000.0) == pytest.approx(0.008)
    assert ventricle_brain_ratio(5.0, 5.0) == 1.0
    with pytest.raises(ValueError):
        ventricle_brain_ratio(1.0, 0.0)


def test_metrics_invariant_under_shared_reindexing():
    rng = np.random.default_rng(6)
    a = rng.integers(0, 2, (6, 6, 6))
    b = rng.integers(0, 2, (6, 6, 6))
    if a.sum() == 0 or b.sum() == 0:
        a[0, 0, 0] = 1
        b[0, 0, 0] = 1
    la, lb = _lab(a), _lab(b)
    # flip both along every axis: all metrics unchanged
    fa = _lab(a[::-1, ::-1, ::-1].copy())
    fb = _lab(b[::-1, ::-1, ::-1].copy())
    assert dice(fa, fb) == dice(la, lb)
    assert mean_absolute_surface_distance(fa, fb) == pytest.approx(
        mean_absolute_surface_distance(la, lb)
    )
    assert hausdorff(fa, fb) == pytest.approx(hausdorff(la, lb))
