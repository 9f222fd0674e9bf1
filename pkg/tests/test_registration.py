import numpy as np
import pytest

from fontus.errors import EmptyLabelError, EmptyOverlapError
from fontus.registration import (
    AffineMap,
    AtlasEntry,
    CompositeTransform,
    FreeFormDeformation,
    PTermParams,
    RigidParams,
    _patch_scores,
    downsample2,
    lc2_metric,
    p_adjust,
    p_term,
    register_nonrigid,
    register_rigid,
    warp_label,
    warp_volume,
)
from fontus.volume import LabelMap, Volume, gradient_magnitude
from tests.conftest import REG_AXES, REG_DIMS, REG_SPACING, cached_phantom

IDENTITY = CompositeTransform(AffineMap.identity())


# ---------------------------------------------------------------------------
# LC2
# ---------------------------------------------------------------------------

def test_lc2_exact_linear_pair_scores_one():
    rng = np.random.default_rng(0)
    mri = Volume(rng.uniform(0, 255, (32, 32, 32)))
    us = Volume(3.0 * mri.data + 5.0)
    assert lc2_metric(us, mri, IDENTITY) == pytest.approx(1.0, abs=1e-9)


def test_lc2_noise_scores_low():
    rng = np.random.default_rng(1)
    mri = Volume(rng.uniform(0, 255, (24, 24, 24)))
    for seed in range(10):
        noise = np.random.default_rng(100 + seed).uniform(0, 255, (24, 24, 24))
        assert lc2_metric(Volume(noise), mri, IDENTITY) < 0.1


def test_lc2_patch_scores_match_normal_equations_oracle():
    rng = np.random.default_rng(2)
    mri = Volume(rng.uniform(0, 255, (32, 32, 32)))
    us = Volume(rng.uniform(0, 255, (32, 32, 32)))
    g = gradient_magnitude(mri)
    m_w, _ = warp_volume(mri, IDENTITY, us)
    g_w, _ = warp_volume(g, IDENTITY, us)
    r, stride = 3, 2
    scores, _ = _patch_scores(us.data, m_w, g_w, r, stride)
    centers = [np.arange(r, d - r, stride) for d in us.dims]
    shape = tuple(len(c) for c in centers)
    score_grid = scores.reshape(shape)
    for _ in range(5):
        ii = tuple(rng.integers(0, s) for s in shape)
        ci = tuple(centers[d][ii[d]] for d in range(3))
        sl = tuple(slice(c - r, c + r + 1) for c in ci)
        up, mp, gp = us.data[sl].ravel(), m_w[sl].ravel(), g_w[sl].ravel()
        basis = np.stack([mp, gp, np.ones_like(mp)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, up, rcond=None)
        ssr = float(((up - basis @ coef) ** 2).sum())
        sst = float(((up - up.mean()) ** 2).sum())
        assert abs(score_grid[ii] - (1.0 - ssr / sst)) < 1e-8


def test_lc2_affine_intensity_invariance():
    rng = np.random.default_rng(3)
    mri = Volume(rng.uniform(0, 255, (24, 24, 24)))
    us = Volume(rng.uniform(0, 255, (24, 24, 24)))
    a = lc2_metric(us, mri, IDENTITY)
    b = lc2_metric(Volume(2.5 * us.data + 40.0), mri, IDENTITY)
    assert a == pytest.approx(b, abs=1e-9)


def test_lc2_empty_overlap_raises():
    vol = Volume(np.ones((8, 8, 8)))
    far = CompositeTransform(AffineMap(np.eye(3), np.asarray([1e5, 0.0, 0.0])))
    with pytest.raises(EmptyOverlapError):
        lc2_metric(vol, vol, far)


# ---------------------------------------------------------------------------
# P term
# ---------------------------------------------------------------------------

def test_p_term_hand_value():
    data = np.zeros((4, 4, 4))
    data[0, 0, 0] = 75.0  # lumen voxel at I_L - 10
    data[1, 0, 0] = 135.0  # plexus voxel at I_H + 20
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[0, 0, 0] = 1
    lab[1, 0, 0] = 2
    params = PTermParams(c1=0.02, c2=0.25, i_low=85.0, i_high=115.0)
    value = p_term(Volume(data), LabelMap(lab), params)
    assert abs(value - 0.425) < 1e-12


def test_p_term_vanishing_margins():
    data = np.zeros((4, 4, 4))
    data[0, 0, 0] = 85.0
    data[1, 0, 0] = 115.0
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[0, 0, 0] = 1
    lab[1, 0, 0] = 2
    params = PTermParams()
    assert p_term(Volume(data), LabelMap(lab), params) == pytest.approx(0.25 / 2)


def test_p_term_intensity_fallback_when_binary():
    data = np.zeros((4, 4, 4))
    data[0, 0, 0] = 75.0   # below the window midpoint -> treated as lumen
    data[1, 0, 0] = 135.0  # above -> plexus
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[0, 0, 0] = 1
    lab[1, 0, 0] = 1
    params = PTermParams()
    assert p_term(Volume(data), LabelMap(lab), params) == pytest.approx(0.425)


def test_p_term_empty_label_raises():
    with pytest.raises(EmptyLabelError):
        p_term(Volume(np.zeros((3, 3, 3))), LabelMap(np.zeros((3, 3, 3), dtype=np.uint8)), PTermParams())


def test_p_term_on_true_ventricles_beats_shifted(reg_phantom):
    us = reg_phantom.us
    params = PTermParams.from_us(us)
    truth = reg_phantom.truth_ventricles
    p_true = p_term(us, truth, params)
    shift_vox = int(round(10.0 / us.spacing[0]))
    shifted = np.zeros_like(truth.data)
    shifted[shift_vox:, :, :] = truth.data[:-shift_vox, :, :]
    p_shift = p_term(us, LabelMap(shifted, us.spacing), params)
    assert p_true > p_shift


def test_p_term_nonnegative_and_bounded():
    rng = np.random.default_rng(11)
    params = PTermParams()
    for _ in range(20):
        data = rng.uniform(1.0, 255.0, (5, 5, 5))  # all insonated
        lab = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
        if not lab.any():
            lab[0, 0, 0] = 1
        p = p_term(Volume(data), LabelMap(lab), params)
        assert 0.0 <= p <= params.c1 * 255.0 + params.c2


def test_p_adjust_identities():
    assert p_adjust(0.7, 123.0, 123.0) == 0.7
    assert p_adjust(1.0, 1.0, 16.0) == pytest.approx(0.5, abs=1e-15)
    values = [p_adjust(0.5, v, 100.0) for v in (10.0, 30.0, 70.0, 100.0, 160.0)]
    assert all(b > a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        p_adjust(0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------

def test_warp_label_identity(reg_phantom):
    lab = reg_phantom.truth_ventricles
    out = warp_label(lab, IDENTITY, reg_phantom.us)
    assert np.array_equal(out.data, lab.data)


def test_warp_label_one_voxel_shift(reg_phantom):
    lab = reg_phantom.truth_ventricles
    dx = reg_phantom.us.spacing[0]
    t = CompositeTransform(AffineMap(np.eye(3), np.asarray([dx, 0.0, 0.0])))
    out = warp_label(lab, t, reg_phantom.us)
    assert np.array_equal(out.data[:-1, :, :], lab.data[1:, :, :])


def test_warp_label_rigid_volume_change_small(reg_phantom):
    lab = reg_phantom.truth_ventricles
    rigid = RigidParams((0.1, -0.07, 0.12), (3.0, -2.0, 1.5))
    pivot = np.asarray(reg_phantom.truth_ellipsoid.center)
    t = CompositeTransform(rigid.to_affine(pivot))
    out = warp_label(lab, t, reg_phantom.us)
    n_in = int(np.count_nonzero(lab.data))
    n_out = int(np.count_nonzero(out.data))
    from fontus.metrics import boundary_voxels
    n_boundary = len(boundary_voxels(LabelMap((lab.data > 0).astype(np.uint8), lab.spacing)))
    assert abs(n_out - n_in) <= n_boundary


def test_downsample2_preserves_mean_and_geometry():
    rng = np.random.default_rng(4)
    vol = Volume(rng.uniform(0, 10, (8, 8, 8)), (1.0, 1.0, 1.0), (2.0, 2.0, 2.0))
    ds = downsample2(vol)
    assert ds.dims == (4, 4, 4)
    assert ds.spacing == (2.0, 2.0, 2.0)
    assert ds.origin == (2.5, 2.5, 2.5)
    assert ds.data.mean() == pytest.approx(vol.data.mean())


# ---------------------------------------------------------------------------
# Rigid registration
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def rigid_phantom():
    return cached_phantom(seed=7, dims=(64, 64, 64), spacing=(1.6, 1.6, 1.6),
                          semi_axes_range=(30.0, 36.0))


def test_register_rigid_recovers_perturbation(rigid_phantom):
    ph = rigid_phantom
    atlas = AtlasEntry("self", ph.mri, ph.truth_ventricles)
    rng = np.random.default_rng(0)
    init = RigidParams(tuple(np.radians(rng.uniform(-10, 10, 3))), tuple(rng.uniform(-10, 10, 3)))
    res = register_rigid(ph.us, atlas, init, budget=400)
    assert np.max(np.abs(np.degrees(res.params.angles))) < 2.0
    assert np.max(np.abs(res.params.translation)) < 2.0
    assert res.score >= res.init_score


def test_register_rigid_fixed_point(rigid_phantom):
    ph = rigid_phantom
    atlas = AtlasEntry("self", ph.mri, ph.truth_ventricles)
    res = register_rigid(ph.us, atlas, RigidParams(), budget=150)
    # starting at the optimum: stays within optimizer tolerance
    assert np.max(np.abs(res.params.as_vector())) < 1e-1
    assert res.score >= res.init_score


def test_register_rigid_deterministic(rigid_phantom):
    ph = rigid_phantom
    atlas = AtlasEntry("self", ph.mri, ph.truth_ventricles)
    init = RigidParams((0.05, -0.03, 0.08), (4.0, -3.0, 2.0))
    a = register_rigid(ph.us, atlas, init, budget=120)
    b = register_rigid(ph.us, atlas, init, budget=120)
    assert a.params == b.params
    assert a.score == b.score


# ---------------------------------------------------------------------------
# Non-rigid registration
# ---------------------------------------------------------------------------

def test_ffd_displacement_interpolation():
    ffd = FreeFormDeformation.zero((3, 3, 3), (0.0, 0.0, 0.0), (10.0, 10.0, 10.0))
    disp = np.zeros((3, 3, 3, 3))
    disp[1, 1, 1] = [2.0, 0.0, 0.0]
    ffd = FreeFormDeformation(ffd.control_dims, ffd.control_spacing, ffd.control_origin, disp)
    center = ffd.displacement_at(np.asarray([[5.0, 5.0, 5.0]]))
    assert center[0] == pytest.approx([2.0, 0.0, 0.0])
    corner = ffd.displacement_at(np.asarray([[0.0, 0.0, 0.0]]))
    assert corner[0] == pytest.approx([0.0, 0.0, 0.0])
    mid = ffd.displacement_at(np.asarray([[2.5, 5.0, 5.0]]))
    assert mid[0, 0] == pytest.approx(1.0)


def test_register_nonrigid_score_decomposition(reg_phantom):
    ph = reg_phantom
    atlas = AtlasEntry("self", ph.mri, ph.truth_ventricles)
    pterm = PTermParams.from_us(ph.us)
    rigid = RigidParams()
    res = register_nonrigid(ph.us, atlas, rigid, pterm, budget=150,
                            control_sweeps=((2, 2, 2),), mean_label_volume=2000.0)
    t = CompositeTransform(rigid.to_affine(
        np.asarray(ph.us.origin) + 0.5 * np.asarray(ph.us.spacing) * (np.asarray(ph.us.dims) - 1)
    ), res.ffd)
    lc2 = lc2_metric(ph.us, ph.mri, t, gradmag=atlas.gradmag)
    lab = warp_label(atlas.ventricle_label, t, ph.us)
    p = p_term(ph.us, lab, pterm)
    vk = float(np.count_nonzero(lab.data)) * ph.us.voxel_volume
    expected = lc2 + p_adjust(p, vk, 2000.0)
    assert abs(res.score - expected) < 1e-9


def test_register_nonrigid_not_below_rigid_score(reg_phantom):
    ph = reg_phantom
    atlas = AtlasEntry("self", ph.mri, ph.truth_ventricles)
    pterm = PTermParams.from_us(ph.us)
    rigid_res = register_rigid(ph.us, atlas, RigidParams(), budget=100)
    nr = register_nonrigid(ph.us, atlas, rigid_res.params, pterm, budget=200,
                           control_sweeps=((2, 2, 2),))
    # the P term only adds reward on top of LC2, and the stage never returns
    # a transform scoring below the undeformed rigid one
    assert nr.score >= nr.lc2
    assert nr.p_adjusted >= 0.0
    assert nr.score >= rigid_res.score


def test_register_nonrigid_improves_dice_on_dilated_subject():
    from fontus.metrics import dice

    subject = cached_phantom(seed=55, dims=REG_DIMS, spacing=REG_SPACING,
                             semi_axes_range=REG_AXES, ventricle_scale=1.5,
                             ventricle_dilation=1.25)
    atlas_ph = cached_phantom(seed=56, dims=REG_DIMS, spacing=REG_SPACING,
                              semi_axes_range=REG_AXES, ventricle_scale=1.5)
    from fontus.orient import prior_similarity_transform
    from fontus.ellipsoid import Ellipsoid

    prior = prior_similarity_transform(subject.truth_ellipsoid, atlas_ph.truth_ellipsoid)
    inv_scale = 1.0 / np.asarray(prior.scale)
    base = AffineMap(np.diag(inv_scale), -np.asarray(prior.translation) * inv_scale)
    atlas = AtlasEntry("other", atlas_ph.mri, atlas_ph.truth_ventricles)
    pivot = np.asarray(subject.truth_ellipsoid.center)
    rigid = register_rigid(subject.us, atlas, RigidParams(), budget=150, base=base, pivot=pivot)
    pterm = PTermParams.from_us(subject.us)
    nr = register_nonrigid(subject.us, atlas, rigid.params, pterm, budget=500,
                           base=base, pivot=pivot, control_sweeps=((3, 3, 3),))
    truth = LabelMap((subject.truth_ventricles.data > 0).astype(np.uint8), REG_SPACING)
    rigid_label = warp_label(
        atlas.ventricle_label,
        CompositeTransform(base.compose(rigid.params.to_affine(pivot))),
        subject.us,
    )
    d_rigid = dice(LabelMap((rigid_label.data > 0).astype(np.uint8), REG_SPACING), truth)
    d_ffd = dice(LabelMap((nr.warped_label.data > 0).astype(np.uint8), REG_SPACING), truth)
    assert d_ffd >= d_rigid
