import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import random_pose, simple_camera
from sogtrack.geometry import (
    Camera,
    Gaussian2D,
    Gaussian3D,
    GeometryError,
    Pose,
    apply_pose,
    axis_angle_to_quaternion,
    fix_quaternion_trajectory,
    matrix_to_quaternion,
    pose_points_t,
    project_point,
    project_t,
    quat_to_rotmat_t,
    quaternion_angle,
    quaternion_multiply,
    quaternion_normalize,
    quaternion_slerp,
    quaternion_to_matrix,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
points = arrays(np.float64, 3, elements=finite)


def test_normalize_examples():
    assert np.allclose(quaternion_normalize([2, 0, 0, 0]), [1, 0, 0, 0])
    assert np.allclose(quaternion_normalize([1, 1, 1, 1]), [0.5, 0.5, 0.5, 0.5])
    with pytest.raises(GeometryError, match="degenerate quaternion"):
        quaternion_normalize([0, 0, 0, 0])


@given(quats)
def test_normalize_unit_and_direction(q):
    n = quaternion_normalize(q)
    assert abs(np.linalg.norm(n) - 1) < 1e-12
    assert np.allclose(n * np.linalg.norm(q), q, atol=1e-9)


def test_fix_trajectory_examples():
    out = fix_quaternion_trajectory([[1, 0, 0, 0], [-1, 0, 0, 0]])
    assert np.array_equal(out, [[1, 0, 0, 0], [1, 0, 0, 0]])
    assert np.array_equal(fix_quaternion_trajectory([[1, 0, 0, 0]]), [[1, 0, 0, 0]])


def test_fix_trajectory_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = rng.normal(size=(rng.integers(1, 12), 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        out = fix_quaternion_trajectory(q)
        assert np.all(np.sum(out[1:] * out[:-1], axis=1) >= 0)
        same = np.all(np.isclose(out, q), axis=1) | np.all(np.isclose(out, -q), axis=1)
        assert same.all()
        assert np.array_equal(fix_quaternion_trajectory(out), out)


def test_apply_pose_examples():
    assert np.allclose(apply_pose(Pose(), [1, 2, 3]), [1, 2, 3])
    assert np.allclose(apply_pose(Pose(scale=2.0), [1, 0, 0]), [2, 0, 0])
    rz = Pose(axis_angle_to_quaternion([0, 0, 1], np.pi / 2))
    assert np.allclose(apply_pose(rz, [1, 0, 0]), [0, 1, 0], atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1), points)
def test_pose_inverse_round_trip(seed, x):
    p = random_pose(np.random.default_rng(seed), max_t=5.0)
    assert np.allclose(apply_pose(p, apply_pose(p.inverse(), x)), x, atol=1e-9)


def test_project_point_examples():
    cam = simple_camera()
    uv, z = project_point(cam, [0, 0, 1])
    assert np.allclose(uv, [50, 50]) and z == 1.0
    uv, z = project_point(cam, [1, 0, 2])
    assert np.allclose(uv, [100, 50]) and z == 2.0
    with pytest.raises(GeometryError, match="behind camera"):
        project_point(cam, [0, 0, -1])


@given(st.integers(0, 2 ** 32 - 1), points)
def test_project_depth_is_camera_z(seed, x):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, scale=1.0)
    E = np.eye(4)
    E[:3, :3] = pose.matrix
    E[:3, 3] = pose.translation
    cam = Camera.from_focal(100.0, 64, 64, extrinsics=E)
    pc = cam.world_to_camera(x)
    if pc[2] <= 1e-9:
        with pytest.raises(GeometryError):
            project_point(cam, x)
    else:
        assert project_point(cam, x)[1] == pc[2]


def test_type_invariants():
    with pytest.raises(GeometryError):
        Gaussian3D([0, 0, 0], 0.0)
    with pytest.raises(GeometryError):
        Gaussian2D([0, 0], 1.0, color=[1.2, 0, 0])
    with pytest.raises(GeometryError):
        Gaussian3D([0, 0, 0], 1.0, weight=-1)
    with pytest.raises(GeometryError):
        Pose([1, 1, 0, 0])
    with pytest.raises(GeometryError):
        Pose(scale=0.0)
    with pytest.raises(GeometryError):
        Camera(np.diag([0.0, 1, 1]))
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(GeometryError):
        Camera(np.eye(3), bad)


@given(quats)
def test_matrix_quaternion_round_trip(q):
    q = quaternion_normalize(q)
    R = quaternion_to_matrix(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert quaternion_angle(matrix_to_quaternion(R), q) < 1e-6


@given(quats, quats)
def test_hamilton_product_composes_rotations(a, b):
    a, b = quaternion_normalize(a), quaternion_normalize(b)
    assert np.allclose(quaternion_to_matrix(quaternion_multiply(a, b)),
                       quaternion_to_matrix(a) @ quaternion_to_matrix(b), atol=1e-9)


def test_slerp_endpoints_and_midpoint():
    q0 = np.array([1.0, 0, 0, 0])
    q1 = axis_angle_to_quaternion([0, 1, 0], 1.0)
    assert quaternion_angle(quaternion_slerp(q0, q1, 0.0), q0) < 1e-7
    assert quaternion_angle(quaternion_slerp(q0, q1, 1.0), q1) < 1e-7
    assert abs(quaternion_angle(quaternion_slerp(q0, q1, 0.5), q0) - 0.5) < 1e-9


def test_torch_helpers_match_numpy():
    rng = np.random.default_rng(3)
    poses = [random_pose(rng, max_t=0.1) for _ in range(3)]
    pts = 0.3 * rng.normal(size=(7, 3))
    q = torch.tensor(np.array([p.rotation for p in poses]))
    t = torch.tensor(np.array([p.translation for p in poses])) + torch.tensor([0, 0, 2.0])
    R = quat_to_rotmat_t(q).numpy()
    for i, p in enumerate(poses):
        assert np.allclose(R[i], p.matrix)
    world = pose_points_t(q, t, torch.tensor(np.log(1.3)), torch.tensor(pts))
    cam = Camera.from_focal(80.0, 64, 48)
    uv, z = project_t(torch.tensor(cam.intrinsics)[None].repeat(3, 1, 1), torch.tensor(cam.extrinsics)[None].repeat(3, 1, 1), world)
    for i, p in enumerate(poses):
        w = Pose(p.rotation, p.translation + [0, 0, 2.0], 1.3).apply(pts)
        assert np.allclose(world[i].numpy(), w)
        uv_np, z_np = cam.project(w)
        assert np.allclose(uv[i].numpy(), uv_np) and np.allclose(z[i].numpy(), z_np)
