import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from nerfpose.lie import (
    REORTHONORMALIZE_EVERY,
    Pose,
    Pose2,
    exp_se2,
    exp_so3,
    geodesic_rotation_error,
    log_so3,
    orthonormalize,
    perturb_pose,
    read_poses,
    rng_stream,
    rot2,
    rotation_error,
    translation_error,
    write_poses,
)

vec3 = st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3).map(np.array)


def rotvec_within(max_angle):
    def build(v):
        n = np.linalg.norm(v)
        if n < 1e-6:
            return np.zeros(3)
        return v / n * (max_angle * min(n, 1.0))

    return vec3.map(build)


def test_exp_zero_is_identity():
    assert np.array_equal(exp_so3(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_z_maps_x_to_y():
    R = exp_so3(np.array([0.0, 0.0, math.pi / 2]))
    np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


@given(rotvec_within(math.pi - 1e-6))
def test_exp_matches_scipy(w):
    np.testing.assert_allclose(exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@given(rotvec_within(math.pi - 1e-6))
def test_log_exp_round_trip(w):
    np.testing.assert_allclose(log_so3(exp_so3(w)), w, atol=1e-9)


def test_exp_is_batched():
    w = np.random.default_rng(0).normal(size=(5, 4, 3))
    R = exp_so3(w)
    assert R.shape == (5, 4, 3, 3)
    np.testing.assert_allclose(R[2, 3], exp_so3(w[2, 3]), atol=1e-15)


def test_log_identity_is_zero():
    assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))


def test_log_half_turn_about_z():
    R = np.diag([-1.0, -1.0, 1.0])
    w = log_so3(R)
    assert abs(np.linalg.norm(w) - math.pi) < 1e-12
    np.testing.assert_allclose(np.abs(w), [0.0, 0.0, math.pi], atol=1e-12)


def test_log_near_half_turn_sweep():
    rng = np.random.default_rng(1)
    for _ in range(500):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(axis * (math.pi - 1e-6)).as_matrix()
        w = log_so3(R)
        assert np.linalg.norm(w) <= math.pi
        assert np.max(np.abs(exp_so3(w) - R)) < 1e-6


def test_log_length_never_exceeds_pi():
    R = Rotation.random(200, random_state=3).as_matrix()
    assert all(np.linalg.norm(log_so3(r)) <= math.pi + 1e-15 for r in R)


def test_geodesic_error_of_equal_rotations_is_zero():
    R = Rotation.random(random_state=4).as_matrix()
    assert geodesic_rotation_error(R, R) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("axis", [(1, 0, 0), (0, 1, 0), (0.3, -0.2, 0.9)])
def test_geodesic_error_five_degrees(axis):
    a = np.asarray(axis, dtype=float)
    R = Rotation.from_rotvec(a / np.linalg.norm(a) * math.radians(5.0)).as_matrix()
    assert geodesic_rotation_error(np.eye(3), R) == pytest.approx(5.0, abs=1e-6)


@given(rotvec_within(1.5), rotvec_within(1.5))
def test_geodesic_error_matches_log_length(w1, w2):
    R = exp_so3(w1) @ exp_so3(w2)
    expected = math.degrees(np.linalg.norm(log_so3(R)))
    assert geodesic_rotation_error(np.eye(3), R) == pytest.approx(expected, abs=1e-5)


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1))
def test_geodesic_error_is_symmetric_and_triangular(seed):
    a, b, c = Rotation.random(3, random_state=seed).as_matrix()
    assert geodesic_rotation_error(a, b) == pytest.approx(geodesic_rotation_error(b, a), abs=1e-9)
    assert geodesic_rotation_error(a, c) <= geodesic_rotation_error(a, b) + geodesic_rotation_error(b, c) + 1e-9


def test_translation_error_345():
    a = Pose(np.eye(3), [0.0, 0.0, 0.0])
    b = Pose(np.eye(3), [0.03, 0.04, 0.0])
    assert translation_error(a, b) == pytest.approx(0.05, abs=1e-15)
    assert translation_error(a, a) == 0.0


@given(vec3, vec3)
def test_translation_error_brute_force(t1, t2):
    d = [t1[i] - t2[i] for i in range(3)]
    expected = math.sqrt(sum(x * x for x in d))
    assert translation_error(Pose(np.eye(3), t1), Pose(np.eye(3), t2)) == pytest.approx(expected, abs=1e-12)


def test_perturb_zero_ranges_is_identity():
    p = Pose.look_at((1.0, -2.0, 0.5))
    q = perturb_pose(p, 0.0, 0.0, rng_stream(0))
    assert np.array_equal(q.rotation, p.rotation)
    assert np.array_equal(q.translation, p.translation)


def test_perturb_bounds():
    p = Pose.look_at((1.0, -2.0, 0.5))
    for seed in range(200):
        q = perturb_pose(p, 15.0, 0.25, rng_stream(seed))
        assert rotation_error(p, q) <= 45.0
        assert np.all(np.abs(q.translation - p.translation) <= 0.25)


def test_perturb_is_deterministic():
    p = Pose.look_at((1.0, -2.0, 0.5))
    a = perturb_pose(p, 15.0, 0.25, rng_stream(7, 3))
    b = perturb_pose(p, 15.0, 0.25, rng_stream(7, 3))
    assert a.to_row().tobytes() == b.to_row().tobytes()


def test_perturb_rotates_about_camera_axes_in_order():
    p = Pose.look_at((1.0, -2.0, 0.5))
    q = perturb_pose(p, 15.0, 0.25, rng_stream(11))
    rng = rng_stream(11)
    ax, ay, az = rng.uniform(-15.0, 15.0, size=3)
    # intrinsic x-y-z: scipy's upper-case sequence
    expected = p.rotation @ Rotation.from_euler("XYZ", [ax, ay, az], degrees=True).as_matrix()
    np.testing.assert_allclose(q.rotation, expected, atol=1e-12)
    np.testing.assert_allclose(q.translation, p.translation + rng.uniform(-0.25, 0.25, size=3), atol=0)


def test_perturb_rejects_negative_ranges():
    with pytest.raises(ValueError):
        perturb_pose(Pose.identity(), -1.0, 0.0, rng_stream(0))


def test_million_composed_updates_stay_orthonormal():
    rng = np.random.default_rng(5)
    axes = rng.normal(size=(1000, 3))
    steps = exp_so3(axes / np.linalg.norm(axes, axis=1, keepdims=True))
    R = np.eye(3)
    for k in range(1, 1_000_001):
        R = steps[k % 1000] @ R
        if k % REORTHONORMALIZE_EVERY == 0:
            R = orthonormalize(R)
    assert np.max(np.abs(R @ R.T - np.eye(3))) < 1e-6
    assert abs(np.linalg.det(R) - 1.0) < 1e-6


def test_orthonormalize_projects_to_rotation():
    M = Rotation.random(random_state=2).as_matrix() + 1e-3 * np.random.default_rng(2).normal(size=(3, 3))
    R = orthonormalize(M)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_pose_is_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


def test_pose_rejects_bad_shapes_and_nans():
    with pytest.raises(ValueError):
        Pose(np.eye(2), [0, 0, 0])
    with pytest.raises(ValueError):
        Pose(np.eye(3), [0, np.nan, 0])


def test_look_at_points_minus_z_at_target():
    p = Pose.look_at((2.0, 1.0, 0.5), target=(0.1, 0.2, 0.3))
    forward = -p.rotation[:, 2]
    d = np.array([0.1, 0.2, 0.3]) - np.array([2.0, 1.0, 0.5])
    np.testing.assert_allclose(forward, d / np.linalg.norm(d), atol=1e-12)
    np.testing.assert_allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-12)


def test_pose_text_round_trip(tmp_path):
    poses = [perturb_pose(Pose.look_at((1, 2, 3)), 10, 0.1, rng_stream(i)) for i in range(3)]
    path = tmp_path / "poses.txt"
    write_poses(path, poses)
    back = read_poses(path)
    for a, b in zip(poses, back):
        assert a.to_row().tobytes() == b.to_row().tobytes()
    assert all(len(line.split()) == 12 for line in path.read_text().splitlines())


def test_pose_text_rejects_short_records(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 0 0 0 1 0 0 0 1 0 0\n")
    with pytest.raises(ValueError, match="12 numbers"):
        read_poses(path)


def test_rng_streams_are_keyed():
    a = rng_stream(3, 1, 2).random(4)
    assert np.array_equal(a, rng_stream(3, 1, 2).random(4))
    assert not np.array_equal(a, rng_stream(3, 2, 1).random(4))


def test_pose2_matrix_round_trip():
    p = Pose2(0.7, [1.0, -2.0])
    q = Pose2.from_matrix(p.matrix())
    assert q.theta == pytest.approx(0.7, abs=1e-15)
    np.testing.assert_array_equal(q.translation, p.translation)
    R = rot2(0.7)
    np.testing.assert_allclose(R @ R.T, np.eye(2), atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-15)


def test_exp_se2_matches_matrix_exponential():
    from scipy.linalg import expm

    for xi in ([0.3, -0.2, 0.9], [1.0, 0.5, 0.0], [0.0, 0.0, -2.0], [0.2, 0.1, 1e-10]):
        vx, vy, w = xi
        A = np.array([[0.0, -w, vx], [w, 0.0, vy], [0.0, 0.0, 0.0]])
        np.testing.assert_allclose(exp_se2(np.array(xi)), expm(A), atol=1e-12)
