import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage
from scipy.stats import norm

from lumennav.perception import (
    DegradationProfile,
    NavigationTarget,
    PerceptionError,
    abs_rel,
    calibrate_profile,
    degrade_depth,
    delta1,
    encode_observation,
    extract_navigation_point,
    level_mask,
    quantile_thresholds,
    render_frames,
)
from lumennav.render import CameraIntrinsics, DepthImage, Pose, render_depth
from oracles import brute_force_target


def _img(a, valid=None, far=300.0):
    a = np.asarray(a, dtype=float)
    return DepthImage(a, np.ones(a.shape, bool) if valid is None else valid, far)


# -- depth metrics ----------------------------------------------------------------

def test_metric_worked_examples():
    gt = np.array([[10.0, 20.0], [40.0, 80.0]])
    pred = np.array([[11.0, 20.0], [30.0, 120.0]])
    assert abs_rel(pred, gt) == pytest.approx((0.1 + 0 + 0.25 + 0.5) / 4, abs=1e-15)
    # ratios 1.1, 1, 1.333, 1.5 -> two inside 1.25
    assert delta1(pred, gt) == 0.5
    assert abs_rel(gt, gt) == 0.0 and delta1(gt, gt) == 1.0


def test_metrics_ignore_invalid_pixels():
    gt = np.array([10.0, 0.0, 30.0])
    pred = np.array([10.0, 5.0, 0.0])
    assert abs_rel(pred, gt) == 0.0
    with pytest.raises(PerceptionError):
        abs_rel(np.zeros(2), np.zeros(3))


def test_degradation_identity_and_determinism(simple_env, small_cam):
    gt = render_depth(simple_env, Pose.looking_along(simple_env.centerline.point_at(50.0),
                                                     simple_env.centerline.tangent_at(50.0)), small_cam)
    same = degrade_depth(gt, DegradationProfile(), 7)
    assert np.array_equal(same.depth, gt.depth)
    prof = DegradationProfile(sigma_mult=0.2, blur_radius=1.0, dropout_rate=0.08, seed=3)
    a, b = degrade_depth(gt, prof, 11), degrade_depth(gt, prof, 11)
    c = degrade_depth(gt, prof, 12)
    assert np.array_equal(a.depth, b.depth) and not np.array_equal(a.depth, c.depth)
    assert np.all(a.depth[gt.valid] > 0) and np.all(a.depth[gt.valid] <= gt.far_clip)
    assert np.all(a.depth[~gt.valid] == 0)


def test_fixed_seed_policy_repeats_noise():
    gt = _img(np.full((16, 16), 50.0))
    prof = DegradationProfile(sigma_mult=0.3, seed=5, seed_policy="fixed")
    assert np.array_equal(degrade_depth(gt, prof, 1).depth, degrade_depth(gt, prof, 2).depth)


def test_lognormal_noise_matches_closed_form():
    # white multiplicative noise only: Abs.Rel and delta_1 have closed forms
    sigma = 0.2
    gt = _img(np.full((400, 400), 50.0))
    prof = DegradationProfile(sigma_mult=sigma, noise_scale=0.0, seed=9)
    pred = degrade_depth(gt, prof, 0)
    want_rel = math.exp(sigma**2 / 2) * (2 * norm.cdf(sigma) - 1)
    want_d1 = 2 * norm.cdf(math.log(1.25) / sigma) - 1
    # 160k iid samples: standard errors are below 1e-3
    assert abs_rel(pred, gt) == pytest.approx(want_rel, abs=3e-3)
    assert delta1(pred, gt) == pytest.approx(want_d1, abs=3e-3)


def test_correlated_noise_keeps_unit_variance():
    gt = _img(np.full((256, 256), 50.0))
    pred = degrade_depth(gt, DegradationProfile(sigma_mult=0.1, noise_scale=2.0, seed=1), 0)
    z = np.log(pred.depth / 50.0) / 0.1
    assert np.std(z) == pytest.approx(1.0, abs=0.08)


@pytest.mark.parametrize("kw", [dict(sigma_mult=-1), dict(dropout_rate=0.5), dict(seed_policy="x")])
def test_profile_validation(kw):
    with pytest.raises(PerceptionError):
        DegradationProfile(**kw)


def test_profile_save_load(tmp_path):
    p = DegradationProfile(sigma_mult=0.19, blur_radius=1.0, dropout_rate=0.07, seed=4)
    p.save(tmp_path / "p.json", extra={"abs_rel": 0.24})
    assert DegradationProfile.load(tmp_path / "p.json") == p


def test_calibration_of_perfect_estimator_is_identity(simple_env, small_cam):
    r = calibrate_profile(simple_env, small_cam, 0.0, 1.0, n_validate=5)
    assert r.profile.is_identity and r.abs_rel == 0.0 and r.delta1 == 1.0 and r.converged


def test_calibration_rejects_bad_targets(simple_env, small_cam):
    with pytest.raises(PerceptionError):
        calibrate_profile(simple_env, small_cam, 0.9, 0.5, n_validate=1)
    with pytest.raises(PerceptionError):
        calibrate_profile(simple_env, small_cam, 0.2, 1.5, n_validate=1)


def test_small_calibration_hits_targets(simple_env, small_cam):
    r = calibrate_profile(simple_env, small_cam, 0.15, 0.8, n_search=20, n_validate=40)
    assert abs(r.abs_rel - 0.15) <= 0.02 and abs(r.delta1 - 0.8) <= 0.04


# -- quantile levels and the navigation point -------------------------------------

def test_quantile_thresholds_small_example():
    q = quantile_thresholds(np.arange(1, 11), 5)
    assert q[0] == -np.inf
    assert list(q[1:]) == [2, 4, 6, 8, 10]
    # uneven split: ceil(7k/3) -> ranks 3, 5, 7
    assert list(quantile_thresholds(np.arange(1, 8), 3)[1:]) == [3, 5, 7]


@given(st.lists(st.floats(0.1, 300.0), min_size=1, max_size=200), st.integers(1, 25))
def test_levels_partition_valid_pixels(values, n_levels):
    img = _img(np.array(values).reshape(1, -1))
    masks = [level_mask(img, k, n_levels) for k in range(1, n_levels + 1)]
    total = np.sum(masks, axis=0)
    assert np.all(total == 1)


def test_enclosed_region_contains_band(simple_env, small_cam):
    pose = Pose.looking_along(simple_env.centerline.point_at(80.0), simple_env.centerline.tangent_at(80.0))
    d = render_depth(simple_env, pose, small_cam)
    band = level_mask(d, 8, 20)
    enc = level_mask(d, 8, 20, region="enclosed")
    assert np.all(enc[band]) and enc.sum() > band.sum()
    # the enclosed area of level k equals the union of levels k..n
    union = np.any([level_mask(d, k, 20) for k in range(8, 21)], axis=0)
    assert np.array_equal(enc, union)


def test_far_first_order_reverses_levels(simple_env, small_cam):
    pose = Pose.looking_along(simple_env.centerline.point_at(80.0), simple_env.centerline.tangent_at(80.0))
    d = render_depth(simple_env, pose, small_cam)
    assert np.array_equal(level_mask(d, 3, 20, "far_first"), level_mask(d, 18, 20))
    with pytest.raises(PerceptionError):
        level_mask(d, 21, 20)
    with pytest.raises(PerceptionError):
        level_mask(d, 2, 20, "sideways")


def test_tie_breaking_largest_component_first_in_raster_order():
    # two equal level-1 blobs: the one met first in raster order wins
    a = np.full((8, 8), 100.0)
    a[1:3, 1:3] = 1.0
    a[5:7, 5:7] = 1.0
    t = extract_navigation_point(_img(a), level=1, n_levels=8, min_pixels=1)
    assert (t.t_x, t.t_y, t.level_pixel_count) == (2.0, 2.0, 4)


def test_invalid_targets():
    assert not extract_navigation_point(_img(np.full((8, 8), 5.0))).valid
    assert not extract_navigation_point(_img(np.zeros((8, 8)), np.zeros((8, 8), bool))).valid
    a = np.arange(64, dtype=float).reshape(8, 8) + 1
    t = extract_navigation_point(_img(a), level=8, n_levels=20, min_pixels=10)
    assert not t.valid and t.level_pixel_count < 10


def _random_frames(env, n, cam, seed):
    return render_frames(env, cam, n, seed=seed)


def test_matches_brute_force_on_rendered_frames(complex_env):
    cam = CameraIntrinsics(48, 48, 120.0, 300.0)
    frames = _random_frames(complex_env, 12, cam, [5, 5])
    prof = DegradationProfile(sigma_mult=0.2, blur_radius=1.0, dropout_rate=0.08)
    for i, gt in enumerate(frames):
        for d in (gt, degrade_depth(gt, prof, i)):
            for level, region in ((8, "band"), (8, "enclosed"), (20, "band"), (1, "band")):
                got = extract_navigation_point(d, level, 20, region=region)
                ref = brute_force_target(d.depth, d.valid, level, 20, region=region)
                assert ref is not None
                assert (got.t_x, got.t_y, got.valid, got.level_pixel_count) == ref


@pytest.mark.parametrize("size,region", [(128, "band"), (128, "enclosed"), (64, "enclosed")])
def test_on_axis_centroid_is_centered(straight, size, region):
    cam = CameraIntrinsics(size, size, 120.0, 300.0)
    c = size / 2.0
    for z in (20.0, 80.0, 140.0):
        d = render_depth(straight, Pose.looking_along([0, 0, z], [0, 0, 1.0]), cam)
        t = extract_navigation_point(d, 8, 20, region=region)
        assert t.valid
        assert math.hypot(t.t_x - c, t.t_y - c) <= 2.0


def test_thin_ring_fragments_at_low_resolution(straight):
    # at 64 px the level-8 ring is about one pixel wide and breaks up under
    # 4-connectivity, so the band centroid lands on an arc fragment
    cam = CameraIntrinsics(64, 64, 120.0, 300.0)
    d = render_depth(straight, Pose.looking_along([0, 0, 20.0], [0, 0, 1.0]), cam)
    band = extract_navigation_point(d, 8, 20)
    assert band.level_pixel_count < level_mask(d, 8, 20).sum() / 4


def test_monotone_rescale_invariance(complex_env):
    cam = CameraIntrinsics(48, 48, 120.0, 300.0)
    for d in _random_frames(complex_env, 5, cam, [6, 1]):
        base = extract_navigation_point(d, 8, 20, region="enclosed")
        warped = DepthImage(np.where(d.valid, np.sqrt(d.depth) * 3.0 + 1.0, 0.0), d.valid, d.far_clip)
        assert extract_navigation_point(warped, 8, 20, region="enclosed") == base


def test_mirror_equivariance(complex_env):
    cam = CameraIntrinsics(48, 48, 120.0, 300.0)
    checked = 0
    for d in _random_frames(complex_env, 8, cam, [7, 1]):
        sizes = np.bincount(ndimage.label(level_mask(d, 8, 20, region="enclosed"))[0].ravel())[1:]
        if sizes.size == 0 or np.sum(sizes == sizes.max()) > 1:
            continue  # a size tie may legitimately pick a different component
        t = extract_navigation_point(d, 8, 20, region="enclosed")
        m = extract_navigation_point(DepthImage(d.depth[:, ::-1], d.valid[:, ::-1], d.far_clip), 8, 20,
                                     region="enclosed")
        assert m.t_x == pytest.approx(48 - t.t_x, abs=1e-9)
        assert m.t_y == pytest.approx(t.t_y, abs=1e-9)
        checked += 1
    assert checked >= 4


def test_observation_encoding():
    cam = CameraIntrinsics(64, 64, 120.0, 300.0)
    o = encode_observation(NavigationTarget(48.0, 16.0, True, 50), cam)
    assert o.as_array() == pytest.approx([0.5, -0.5, 0.5, -0.5])
    lit = encode_observation(NavigationTarget(48.0, 16.0, True, 50), cam, shifted_offset=True)
    assert lit.as_array() == pytest.approx([0.5, -0.5, -0.5, -1.0])
    with pytest.raises(PerceptionError):
        encode_observation(NavigationTarget(0, 0, False, 0), cam)
