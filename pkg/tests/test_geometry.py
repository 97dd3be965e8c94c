import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfloc.errors import AtInfinity, BehindCamera, DegenerateBaseline, RayDivergence
from hfloc.geometry import (Camera, Pose, apply_homography, axis_angle_to_matrix, matrix_to_quat,
                            normalize_homography, project, project_points, quat_to_matrix,
                            rotation_angle_deg, triangulate_two_view)

from conftest import random_pose


def project_oracle(R, t, fx, fy, cx, cy, X):
    xc = [sum(R[i][j] * X[j] for j in range(3)) + t[i] for i in range(3)]
    return fx * xc[0] / xc[2] + cx, fy * xc[1] / xc[2] + cy


def trace_angle(qa, qb):
    R = quat_to_matrix(qa) @ quat_to_matrix(qb).T
    return np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1)))


def test_project_trivial():
    assert np.allclose(project(Pose(), Camera(10, 10, 1, 1, 0, 0), [0, 0, 1]), [0, 0])
    assert np.allclose(project(Pose(), Camera(200, 200, 100, 100, 50, 50), [1, 1, 2]), [100, 100])


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project(Pose(), Camera(10, 10, 1, 1, 0, 0), [0, 0, -1])
    with pytest.raises(BehindCamera):
        project(Pose(), Camera(10, 10, 1, 1, 0, 0), [0, 0, 0])


def test_project_matches_oracle(rng):
    cam = Camera(640, 480, 420.0, 430.0, 300.0, 250.0)
    for _ in range(50):
        pose = random_pose(rng)
        X = pose.inverse().transform(np.array([rng.normal(), rng.normal(), rng.uniform(1, 10)]))
        u = project(pose, cam, X)
        o = project_oracle(pose.R.tolist(), pose.tvec.tolist(), cam.fx, cam.fy, cam.cx, cam.cy, X.tolist())
        assert np.allclose(u, o, atol=1e-9)


def test_project_points_marks_behind(cam):
    uv, front = project_points(Pose(), cam, np.array([[0, 0, 1.0], [0, 0, -1.0]]))
    assert front.tolist() == [True, False]
    assert np.isnan(uv[1]).all()


def test_pose_inverse_and_compose(rng):
    a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
    ident = a.inverse().compose(a)
    assert np.allclose(ident.R, np.eye(3), atol=1e-9) and np.allclose(ident.tvec, 0, atol=1e-9)
    lhs = a.compose(b).compose(c)
    rhs = a.compose(b.compose(c))
    assert np.allclose(lhs.R, rhs.R, atol=1e-9) and np.allclose(lhs.tvec, rhs.tvec, atol=1e-9)
    assert abs(np.linalg.norm(lhs.qvec) - 1) < 1e-9


def test_matrix_quat_roundtrip(rng):
    for _ in range(100):
        R = axis_angle_to_matrix(rng.normal(size=3) * 2)
        assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_triangulate_trivial(cam):
    a = Pose()
    b = Pose.from_matrix(np.eye(3), [-1.0, 0, 0])
    X = np.array([0, 0, 5.0])
    Y, res = triangulate_two_view(a, b, cam, cam, project(a, cam, X), project(b, cam, X))
    assert np.allclose(Y, X, atol=1e-6)
    assert np.all(res < 1e-6)


def test_triangulate_degenerate(cam):
    with pytest.raises(DegenerateBaseline):
        triangulate_two_view(Pose(), Pose(), cam, cam, [320, 240], [320, 240])


def test_triangulate_small_angle(cam):
    a = Pose()
    b = Pose.from_matrix(np.eye(3), [-0.01, 0, 0])
    X = np.array([0, 0, 50.0])
    with pytest.raises(RayDivergence):
        triangulate_two_view(a, b, cam, cam, project(a, cam, X), project(b, cam, X))


def test_triangulate_random_pair(rng, cam):
    a = Pose()
    b = Pose.from_matrix(axis_angle_to_matrix([0, 0.1, 0]), [-1.5, 0.1, 0.2])
    pts = np.column_stack([rng.uniform(-2, 2, 100), rng.uniform(-1.5, 1.5, 100), rng.uniform(4, 9, 100)])
    for X in pts:
        pa, pb = project(a, cam, X), project(b, cam, X)
        Y, res = triangulate_two_view(a, b, cam, cam, pa, pb)
        assert np.allclose(Y, X, atol=1e-6)
        # project after triangulate is the identity on pixels
        assert np.allclose(project(a, cam, Y), pa, atol=1e-6)
        assert np.allclose(project(b, cam, Y), pb, atol=1e-6)


def test_rotation_angle_trivial():
    q = np.array([1.0, 0, 0, 0])
    assert rotation_angle_deg(q, q) == 0
    qz = matrix_to_quat(axis_angle_to_matrix([0, 0, np.pi / 2]))
    assert abs(rotation_angle_deg(qz, q) - 90) < 1e-9


def test_rotation_angle_matches_trace(rng):
    for _ in range(200):
        qa = matrix_to_quat(axis_angle_to_matrix(rng.normal(size=3)))
        qb = matrix_to_quat(axis_angle_to_matrix(rng.normal(size=3)))
        assert abs(rotation_angle_deg(qa, qb) - trace_angle(qa, qb)) < 1e-7


unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: np.asarray(v) / np.linalg.norm(v))


@settings(max_examples=200, deadline=None)
@given(unit_quats, unit_quats, unit_quats)
def test_rotation_angle_metric(qa, qb, qc):
    ab, ba = rotation_angle_deg(qa, qb), rotation_angle_deg(qb, qa)
    assert abs(ab - ba) < 1e-7
    assert 0 <= ab <= 180
    assert rotation_angle_deg(qa, qa) < 1e-6
    assert rotation_angle_deg(qa, qc) <= ab + rotation_angle_deg(qb, qc) + 1e-7


def test_homography_trivial():
    assert np.allclose(apply_homography(np.eye(3), [3, 4]), [3, 4])
    H = np.array([[1, 0, 2], [0, 1, -1], [0, 0, 1.0]])
    assert np.allclose(apply_homography(H, [0, 0]), [2, -1])


def test_homography_at_infinity():
    H = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]])
    with pytest.raises(AtInfinity):
        apply_homography(H, [0, 5])


def test_homography_inverse_roundtrip(rng):
    for _ in range(100):
        H = np.eye(3) + rng.normal(scale=[[0.2, 0.2, 5], [0.2, 0.2, 5], [1e-4, 1e-4, 0]])
        H = normalize_homography(H)
        Hi = np.linalg.inv(H)
        p = rng.uniform(0, 500, 2)
        assert np.allclose(apply_homography(Hi, apply_homography(H, p)), p, atol=1e-8)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(100, 100, -1, 1, 50, 50)
    with pytest.raises(ValueError):
        Camera(100, 100, 1, 1, 100, 50)


def test_distortion_roundtrip(rng):
    cam = Camera(640, 480, 500, 500, 320, 240, k1=-0.1)
    xn = rng.uniform(-0.5, 0.5, (50, 2))
    assert np.allclose(cam.undistort(cam.distort(xn)), xn, atol=1e-9)
