import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import points_in_view, random_pose
from i2preg.geom import Pose, project_points
from i2preg.pose import (DegenerateConfiguration, EvalConfig, RansacConfig, RegistrationResult, epnp, epnp_ransac,
                         euler_xyz, refine_focal, registration_errors, registration_recall, summarize)

seeds = st.integers(0, 2**32 - 1)


def rot_angle(R):
    return math.acos(max(-1.0, min(1.0, (np.trace(R) - 1) / 2)))


def pose_error(a: Pose, b: Pose):
    return rot_angle(a.rotation.T @ b.rotation), float(np.linalg.norm(a.translation - b.translation))


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------

@given(seeds)
@settings(max_examples=50, deadline=None)
def test_epnp_exact_correspondences(seed):
    from i2preg.scenegen import PROTOCOL_CAMERA as cam
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, cam, pose, 20)
    dr, dt = pose_error(epnp(pw, uv, cam), pose)
    assert dr < 1e-6 and dt < 1e-6


def test_epnp_identity_pose(rng, protocol_camera):
    pc, uv = points_in_view(rng, protocol_camera, Pose.identity(), 12)
    dr, dt = pose_error(epnp(pc, uv, protocol_camera), Pose.identity())
    assert dr < 1e-6 and dt < 1e-6


def test_epnp_planar_points(rng, protocol_camera):
    pose = random_pose(rng)
    pts = np.column_stack([rng.uniform(-5, 5, (30, 2)), np.zeros(30)])
    pts = pose.inverse().apply(pts + [0, 0, 15])  # plane in front of the camera
    uv = project_points(protocol_camera, pose, pts)[0]
    dr, dt = pose_error(epnp(pts, uv, protocol_camera), pose)
    assert dr < 1e-6 and dt < 1e-6


def test_epnp_degenerate_inputs(rng, protocol_camera):
    line = np.outer(np.linspace(1, 5, 8), [1.0, 2.0, 3.0]) + [0, 0, 10]
    uv = project_points(protocol_camera, Pose.identity(), line)[0]
    with pytest.raises(DegenerateConfiguration):
        epnp(line, uv, protocol_camera)
    pw, uv = points_in_view(rng, protocol_camera, Pose.identity(), 3)
    with pytest.raises(DegenerateConfiguration):
        epnp(pw, uv, protocol_camera)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_epnp_permutation_invariant(seed):
    from i2preg.scenegen import PROTOCOL_CAMERA as cam
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, cam, pose, 25)
    uv = uv + rng.normal(0, 0.5, uv.shape)
    a = epnp(pw, uv, cam)
    perm = rng.permutation(25)
    b = epnp(pw[perm], uv[perm], cam)
    assert np.abs(a.rotation - b.rotation).max() < 1e-8
    assert np.abs(a.translation - b.translation).max() < 1e-8


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

@pytest.fixture
def corrupted(rng, protocol_camera):
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, protocol_camera, pose, 50)
    bad = rng.choice(50, 15, replace=False)
    uv[bad] = rng.uniform([0, 0], [1920, 1080], size=(15, 2))
    return pose, pw, uv, bad


def test_ransac_rejects_corrupted_pairs(corrupted, protocol_camera):
    pose, pw, uv, bad = corrupted
    res = epnp_ransac(pw, uv, protocol_camera).evaluate(pose)
    assert res.success and res.rre < 0.1 and res.rte < 0.05
    assert not set(bad.tolist()) & set(res.inlier_ids.tolist())
    assert len(res.inlier_ids) == 35


def test_ransac_all_exact_keeps_everything(rng, protocol_camera):
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, protocol_camera, pose, 40)
    res = epnp_ransac(pw, uv, protocol_camera)
    assert np.array_equal(res.inlier_ids, np.arange(40))


def test_ransac_seed_determinism(corrupted, protocol_camera):
    _, pw, uv, _ = corrupted
    cfg = RansacConfig(seed=17, confidence=1.0, max_iterations=200)
    a, b = epnp_ransac(pw, uv, protocol_camera, cfg), epnp_ransac(pw, uv, protocol_camera, cfg)
    assert np.array_equal(a.pose.rotation, b.pose.rotation)
    assert np.array_equal(a.pose.translation, b.pose.translation)
    assert np.array_equal(a.inlier_ids, b.inlier_ids) and a.iterations == b.iterations == 200


def test_ransac_inliers_are_a_fixed_point(rng, protocol_camera):
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, protocol_camera, pose, 80)
    uv += rng.normal(0, 1.0, uv.shape)
    bad = rng.choice(80, 20, replace=False)
    uv[bad] = rng.uniform([0, 0], [1920, 1080], size=(20, 2))
    res = epnp_ransac(pw, uv, protocol_camera)
    again = epnp(pw[res.inlier_ids], uv[res.inlier_ids], protocol_camera)
    proj = project_points(protocol_camera, again, pw)[0]
    err = np.linalg.norm(proj - uv, axis=1)
    assert np.array_equal(np.flatnonzero(err < 4.0), res.inlier_ids)
    # post-condition audit on the returned pose
    proj = project_points(protocol_camera, res.pose, pw[res.inlier_ids])[0]
    assert np.all(np.linalg.norm(proj - uv[res.inlier_ids], axis=1) < 4.0)


def test_ransac_fails_below_min_inliers(rng, protocol_camera):
    pw = rng.uniform(-10, 10, (30, 3)) + [0, 0, 30]
    uv = rng.uniform([0, 0], [1920, 1080], size=(30, 2))
    res = epnp_ransac(pw, uv, protocol_camera, RansacConfig(min_inliers=20))
    assert res.pose is None
    assert not res.evaluate(Pose.identity()).success and res.rre == math.inf


def test_ransac_config_validation():
    for bad in (dict(max_iterations=0), dict(reprojection_threshold=0), dict(min_inliers=3), dict(confidence=0)):
        with pytest.raises(ValueError):
            RansacConfig(**bad)
    cfg = RansacConfig()
    assert (cfg.max_iterations, cfg.reprojection_threshold, cfg.min_inliers) == (1000, 4.0, 6)


# ---------------------------------------------------------------------------
# focal refinement
# ---------------------------------------------------------------------------

def test_refine_focal_recovers_perturbed_focal(rng, protocol_camera):
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, protocol_camera, pose, 40)
    wrong = protocol_camera.scaled(1.2)
    start = epnp(pw, uv, wrong)
    cam, _, improved = refine_focal(pw, uv, wrong, start)
    assert improved and abs(cam.fx - 960.0) / 960.0 < 0.01


def test_refine_focal_keeps_correct_focal(rng, protocol_camera):
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, protocol_camera, pose, 40)
    uv += rng.normal(0, 0.3, uv.shape)
    cam, _, _ = refine_focal(pw, uv, protocol_camera, epnp(pw, uv, protocol_camera))
    assert abs(cam.fx - 960.0) / 960.0 < 1e-3


def test_refine_focal_needs_six_points(rng, protocol_camera):
    pw, uv = points_in_view(rng, protocol_camera, Pose.identity(), 5)
    pose = epnp(pw, uv, protocol_camera)
    cam, out_pose, improved = refine_focal(pw, uv, protocol_camera.scaled(1.2), pose)
    assert not improved and cam == protocol_camera.scaled(1.2) and out_pose is pose


def test_ransac_with_focal_refinement(rng, protocol_camera):
    pose = random_pose(rng)
    pw, uv = points_in_view(rng, protocol_camera, pose, 60)
    res = epnp_ransac(pw, uv, protocol_camera.scaled(1.1),
                      RansacConfig(refine_focal=True, reprojection_threshold=60.0))
    assert abs(res.camera.fx - 960.0) / 960.0 < 0.01


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_registration_error_cases(rng):
    p = random_pose(rng)
    assert registration_errors(p, p) == pytest.approx((0.0, 0.0), abs=1e-12)
    rz = Pose(Rotation.from_euler("z", 5, degrees=True).as_matrix() @ p.rotation, p.translation)
    gt = Pose(p.rotation.T @ p.rotation, p.translation)
    rot5 = Pose(Rotation.from_euler("z", 5, degrees=True).as_matrix(), p.translation)
    assert registration_errors(rot5, gt)[0] == pytest.approx(5.0, abs=1e-12)
    moved = Pose(p.rotation, p.translation + [1.0, 2.0, 2.0])
    assert registration_errors(moved, p) == pytest.approx((0.0, 3.0), abs=1e-12)
    assert registration_errors(rz, p)[1] == 0.0


@given(seeds)
@settings(max_examples=100)
def test_euler_matches_scipy_intrinsic_xyz(seed):
    R = Rotation.random(random_state=np.random.default_rng(seed))
    ref = R.as_euler("XYZ")
    if abs(abs(ref[1]) - math.pi / 2) < 1e-3:
        return
    assert np.allclose(euler_xyz(R.as_matrix()), ref, atol=1e-9)


@pytest.mark.parametrize("axis", ["x", "y", "z"])
@pytest.mark.parametrize("deg", [-30.0, 7.5, 60.0])
def test_rre_symmetric_for_single_axis(axis, deg):
    R = Rotation.from_euler(axis, deg, degrees=True).as_matrix()
    a, b = Pose(R, np.zeros(3)), Pose.identity()
    assert registration_errors(a, b)[0] == pytest.approx(abs(deg), abs=1e-9)
    assert registration_errors(b, a)[0] == pytest.approx(abs(deg), abs=1e-9)


def test_gimbal_lock_folds_third_angle():
    R = Rotation.from_euler("XYZ", [20, 90, 0], degrees=True).as_matrix()
    a, b, c = np.degrees(euler_xyz(R))
    assert c == 0.0 and b == pytest.approx(90.0) and a == pytest.approx(20.0, abs=1e-6)


def _result(rre, rte):
    return RegistrationResult(Pose.identity(), rre=rre, rte=rte)


def test_recall_cases():
    cfg = EvalConfig()
    assert (cfg.tau_r, cfg.tau_t) == (10.0, 5.0)
    assert registration_recall([_result(0, 0), _result(0, 0)]) == 1.0
    assert registration_recall([_result(0, 0), _result(11, 0)]) == 0.5
    assert registration_recall([_result(10.0, 0)]) == 0.0
    assert registration_recall([_result(0, 5.0)]) == 0.0
    assert registration_recall([_result(math.nextafter(10.0, 0), 4.99)]) == 1.0
    with pytest.raises(ValueError):
        registration_recall([])


def test_summary_reports_median_and_mean():
    s = summarize([_result(1, 1), _result(2, 2), _result(9, 30)])
    assert s["median_rre"] == 2 and s["mean_rre"] == 4 and s["median_rte"] == 2 and s["mean_rte"] == 11
    assert s["rr"] == pytest.approx(2 / 3)


def test_success_flag_matches_thresholds(rng):
    gt = random_pose(rng)
    near = Pose(gt.rotation, gt.translation + [0, 0, 4.9])
    far = Pose(gt.rotation, gt.translation + [0, 0, 5.0])
    assert RegistrationResult(near).evaluate(gt).success
    assert not RegistrationResult(far).evaluate(gt).success
