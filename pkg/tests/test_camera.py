import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbnet import camera
from kbnet.camera import Intrinsics, Pose, exp_se3, reconstruct, scale_intrinsics
from kbnet.errors import BehindCameraError
from kbnet.numerics import Tensor, finite_diff_check, ops


def random_K(rng):
    return Intrinsics(rng.uniform(30, 800), rng.uniform(30, 800), rng.uniform(-10, 500), rng.uniform(-10, 400))


# -- lifting and projection ---------------------------------------------------------

def test_lift_examples():
    np.testing.assert_array_equal(camera.lift(Intrinsics(1, 1, 0, 0), 3, 4), [3, 4, 1])
    np.testing.assert_array_equal(camera.lift(Intrinsics(2, 2, 0, 0), 4, 6), [2, 3, 1])


def test_lift_matches_matrix_inverse():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = random_K(rng)
        u, v = rng.uniform(-50, 600, 2)
        want = np.linalg.inv(K.matrix) @ np.array([u, v, 1.0])
        np.testing.assert_allclose(camera.lift(K, u, v), want, rtol=1e-13, atol=1e-13)
        d = rng.uniform(0.1, 100)
        np.testing.assert_allclose(camera.backproject(K, u, v, d), d * want, rtol=1e-13, atol=1e-12)


def test_backproject_examples():
    K = Intrinsics(500, 480, 320.5, 240.25)
    np.testing.assert_array_equal(camera.backproject(K, K.cx, K.cy, 7.0), [0, 0, 7.0])
    np.testing.assert_array_equal(camera.backproject(Intrinsics(1, 1, 0, 0), 1, 2, 5), [5, 10, 5])


def test_project_examples_and_behind_camera():
    K = Intrinsics(500, 480, 320.5, 240.25)
    np.testing.assert_array_equal(camera.project(K, [0, 0, 3.0]), [K.cx, K.cy])
    with pytest.raises(BehindCameraError):
        camera.project(K, [0.1, 0.2, -1.0])
    with pytest.raises(BehindCameraError):
        camera.project(K, [0.1, 0.2, 0.0])


def test_round_trip_1e5_cases():
    rng = np.random.default_rng(1)
    n = 100_000
    fx, fy = rng.uniform(30, 2000, n), rng.uniform(30, 2000, n)
    cx, cy = rng.uniform(0, 1300, n), rng.uniform(0, 400, n)
    u, v = rng.uniform(0, 1300, n), rng.uniform(0, 400, n)
    d = rng.uniform(0.1, 100, n)
    # vectorised over many cameras by building the points by hand and projecting per camera parameters
    X = (u - cx) / fx * d
    Y = (v - cy) / fy * d
    u2 = fx * X / d + cx
    v2 = fy * Y / d + cy
    assert max(np.max(np.abs(u2 - u)), np.max(np.abs(v2 - v))) < 1e-9
    K = random_K(rng)
    p = camera.project(K, camera.backproject(K, u, v, d))
    assert np.max(np.abs(p - np.stack([u, v], -1))) < 1e-9


def test_scale_intrinsics():
    K = Intrinsics(640.0, 480.0, 320.0, 240.0)
    assert scale_intrinsics(K, 0) == K
    assert scale_intrinsics(K, 1) == Intrinsics(320.0, 240.0, 160.0, 120.0)
    assert scale_intrinsics(K, 5) == Intrinsics(20.0, 15.0, 10.0, 7.5)
    for a in range(4):
        for b in range(4):
            assert scale_intrinsics(scale_intrinsics(K, a), b) == scale_intrinsics(K, a + b)
    with pytest.raises(ValueError):
        scale_intrinsics(K, -1)


def test_intrinsics_validation_and_calibration_file(tmp_path):
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 0, 0)
    with pytest.raises(ValueError):
        Intrinsics.from_matrix([[1, 0.5, 0], [0, 1, 0], [0, 0, 1]])
    cams = [Intrinsics(100.5, 101.25, 47.5, 31.5), Intrinsics(1 / 3, 2 / 3, 0.1, 0.2)]
    camera.write_calibration(tmp_path / "calib.txt", cams)
    assert camera.read_calibration(tmp_path / "calib.txt") == cams
    with pytest.raises(ValueError):
        camera.parse_calibration_line("1 2 3")


def test_perturbed():
    K = Intrinsics(100.0, 90.0, 50.0, 40.0)
    assert K.perturbed("f", -0.25) == Intrinsics(75.0, 67.5, 50.0, 40.0)
    assert K.perturbed("cx", 0.1) == Intrinsics(100.0, 90.0, 55.00000000000001, 40.0)
    assert K.perturbed("cy", 0.0) == K


# -- SE(3) -----------------------------------------------------------------------------

def test_exp_se3_examples():
    P = exp_se3(np.zeros(6))
    np.testing.assert_array_equal(P.R, np.eye(3))
    np.testing.assert_array_equal(P.t, np.zeros(3))
    P = exp_se3([0, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(P.R, np.eye(3))
    np.testing.assert_array_equal(P.t, [1, 0, 0])


def test_rodrigues_term_by_term():
    w = np.array([0.0, 0.0, 0.1])
    theta = 0.1
    W = camera.skew(w / theta)
    want = np.eye(3) + math.sin(theta) * W + (1 - math.cos(theta)) * W @ W
    np.testing.assert_allclose(exp_se3([*w, 0, 0, 0]).R, want, rtol=0, atol=1e-12)
    c, s = math.cos(0.1), math.sin(0.1)
    np.testing.assert_allclose(exp_se3([*w, 0, 0, 0]).R, [[c, -s, 0], [s, c, 0], [0, 0, 1]], rtol=0, atol=1e-15)


def test_rodrigues_small_angle_branch_is_continuous():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    below = camera.so3_exp(axis * 0.99e-4)
    above = camera.so3_exp(axis * 1.01e-4)
    assert np.max(np.abs(below - above)) < 3e-6
    # against the matrix exponential series
    w = axis * 5e-5
    W = camera.skew(w)
    series = np.eye(3) + W + W @ W / 2 + W @ W @ W / 6
    np.testing.assert_allclose(camera.so3_exp(w), series, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=18, max_size=18))
def test_pose_group_laws(vals):
    a, b, c = (exp_se3(vals[i:i + 6]) for i in (0, 6, 12))
    assert a.is_valid() and b.is_valid()
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    assert np.max(np.abs(left.matrix - right.matrix)) < 1e-9
    ident = a.compose(a.inverse())
    assert np.max(np.abs(ident.matrix - np.eye(4))) < 1e-9


def test_relative_pose_maps_t_camera_to_tau_camera():
    rng = np.random.default_rng(2)
    g_t = exp_se3(rng.normal(size=6))
    g_tau = exp_se3(rng.normal(size=6))
    X_t = rng.normal(size=(5, 3))
    world = g_t.apply(X_t)
    X_tau = g_tau.inverse().apply(world)
    np.testing.assert_allclose(camera.relative_pose(g_t, g_tau).apply(X_t), X_tau, atol=1e-12)


def test_so3_exp_op_gradient_and_orthonormality():
    rng = np.random.default_rng(3)
    for scale in (1.0, 1e-6):
        omega = Tensor(rng.normal(size=(3, 3)) * scale, requires_grad=True)
        R = camera.so3_exp_op(omega)
        for i in range(3):
            np.testing.assert_allclose(R.data[i], camera.so3_exp(omega.data[i]), atol=1e-15)
        probe = rng.normal(size=(3, 3, 3))
        assert finite_diff_check(lambda: ops.sum(ops.mul(camera.so3_exp_op(omega), probe)), omega) < 1e-6


# -- reconstruction --------------------------------------------------------------------

def smooth_image(h, w, c=3, seed=0):
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[:h, :w].astype(float)
    img = np.zeros((1, c, h, w))
    for ch in range(c):
        for _ in range(3):
            fu, fv, ph = rng.uniform(0.02, 0.12), rng.uniform(0.02, 0.12), rng.uniform(0, 6)
            img[0, ch] += 0.1 * np.sin(2 * np.pi * (fu * u + fv * v) + ph)
    return img + 0.5


def test_identity_warp_is_exact():
    rng = np.random.default_rng(4)
    img = rng.random((2, 3, 16, 24))
    depth = rng.uniform(0.5, 50, (2, 1, 16, 24))
    out, mask = reconstruct(img, depth, Pose.identity(), Intrinsics(20, 22, 11.5, 7.5))
    # the last row/column may land one ulp past the edge and be masked; the interior is exact
    assert mask[:, 1:-1, 1:-1].all()
    assert np.max(np.abs(out.data - img)[:, :, 1:-1, 1:-1]) < 1e-12


def test_plane_translation_matches_analytic_disparity():
    h, w = 32, 48
    K = Intrinsics(40.0, 40.0, 23.5, 15.5)
    d, tx = 4.0, 0.3  # disparity fx * tx / d = 3 pixels
    shift = K.fx * tx / d
    v, u = np.mgrid[:h, :w].astype(float)

    def pattern(uu, vv):
        return np.stack([np.sin(0.3 * uu + 0.2 * vv), np.cos(0.17 * uu - 0.1 * vv)])[None]

    img_tau = pattern(u, v)
    out, mask = reconstruct(img_tau, np.full((1, 1, h, w), d), Pose(np.eye(3), [tx, 0, 0]), K)
    # the tau camera sees pixel u of the current view at u + shift; sampling is exact on the
    # integer lattice so the reconstruction equals the pattern evaluated there
    expected = pattern(u + shift, v)
    interior = mask[0] & (u + shift <= w - 1)
    assert interior.sum() > 0.8 * h * w
    assert np.max(np.abs(out.data - expected)[:, :, interior]) < 1e-6
    assert not mask[0, :, -3:].any()


def test_rotation_by_pi_masks_almost_everything():
    h, w = 16, 24
    K = Intrinsics(20, 20, 2.0, 1.5)  # principal point near a corner
    R = camera.so3_exp([0, 0, np.pi])
    out, mask = reconstruct(np.ones((1, 1, h, w)), np.full((1, 1, h, w), 3.0), Pose(R, np.zeros(3)), K)
    assert mask.mean() < 0.06
    assert np.all(out.data[0, 0][~mask[0]] == 0)


def test_behind_camera_points_are_masked():
    h, w = 8, 8
    K = Intrinsics(10, 10, 3.5, 3.5)
    out, mask = reconstruct(np.ones((1, 1, h, w)), np.full((1, 1, h, w), 1.0), Pose(np.eye(3), [0, 0, -2.0]), K)
    assert not mask.any()
    assert np.all(out.data == 0)


def test_photometric_gradient_through_reconstruct():
    h, w = 12, 16
    K = Intrinsics(14.0, 14.0, 7.5, 5.5)
    rng = np.random.default_rng(5)
    img_tau = smooth_image(h, w, seed=1)
    img_t = smooth_image(h, w, seed=2)
    depth = Tensor(rng.uniform(3.0, 4.0, (1, 1, h, w)), requires_grad=True)
    vec = Tensor(np.array([[0.01, -0.02, 0.015, 0.05, -0.03, 0.02]]), requires_grad=True)

    def f():
        R, t = camera.pose_from_vector_op(vec)
        out, mask = reconstruct(img_tau, depth, (R, t), K)
        return ops.sum(ops.mul(ops.square(ops.sub(out, img_t)), mask[:, None].astype(float)))

    assert finite_diff_check(f, depth) < 1e-4
    assert finite_diff_check(f, vec) < 1e-4


def test_reconstruct_accepts_per_sample_intrinsics_and_poses():
    rng = np.random.default_rng(6)
    img = rng.random((2, 1, 8, 8))
    depth = np.full((2, 1, 8, 8), 2.0)
    Ks = [Intrinsics(8, 8, 3.5, 3.5), Intrinsics(9, 9, 3.0, 4.0)]
    poses = [Pose.identity(), Pose(np.eye(3), [0.1, 0, 0])]
    out, mask = reconstruct(img, depth, poses, Ks)
    for i in range(2):
        single, m = reconstruct(img[i:i + 1], depth[i:i + 1], poses[i], Ks[i])
        np.testing.assert_array_equal(out.data[i], single.data[0])
        np.testing.assert_array_equal(mask[i], m[0])
