"""Geometric primitives shared by the tracker.

Conventions:
    - quaternions are (w, x, y, z), scalar first, Hamilton product
    - poses map a local point x to ``scale * R @ x + translation``
    - cameras carry a world-to-camera extrinsic and pinhole intrinsics
    - world units are meters, image units are pixels
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

BEHIND_CAMERA_EPS = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Gaussian3D:
    mu: np.ndarray
    sigma: float
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        if not self.sigma > 0:
            raise GeometryError("sigma must be positive")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise GeometryError("color channels must lie in [0, 1]")
        if self.weight < 0:
            raise GeometryError("weight must be non-negative")


@dataclass(frozen=True)
class Gaussian2D:
    mu: np.ndarray
    sigma: float
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    weight: float = 1.0
    depth: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(2))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        if not self.sigma > 0:
            raise GeometryError("sigma must be positive")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise GeometryError("color channels must lie in [0, 1]")


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quaternion_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise GeometryError("degenerate quaternion")
    return q / n


def quaternion_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = np.asarray(a, dtype=float)
    w2, x2, y2, z2 = np.asarray(b, dtype=float)
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quaternion_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = quaternion_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(R) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quaternion_normalize(q)
    return -q if q[0] < 0 else q


def axis_angle_to_quaternion(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quaternion_angle(q1, q2) -> float:
    """Geodesic angle in radians between the rotations of two quaternions."""
    d = abs(float(np.dot(quaternion_normalize(q1), quaternion_normalize(q2))))
    return 2.0 * np.arccos(min(1.0, d))


def quaternion_slerp(q0, q1, t: float) -> np.ndarray:
    q0 = quaternion_normalize(q0)
    q1 = quaternion_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quaternion_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(d)
    return (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / np.sin(theta)


def fix_quaternion_trajectory(quats: Sequence) -> np.ndarray:
    """Flip signs so that consecutive quaternions have non-negative dot products.

    Each output is the input or its negation, so the represented rotations
    are untouched. Running it twice changes nothing.
    """
    q = np.array(quats, dtype=float).reshape(-1, 4)
    for t in range(1, len(q)):
        if np.dot(q[t], q[t - 1]) < 0:
            q[t] = -q[t]
    return q


# ---------------------------------------------------------------------------
# poses and cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise GeometryError("pose rotation must be a unit quaternion")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not self.scale > 0:
            raise GeometryError("pose scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        q_inv = quaternion_conjugate(self.rotation)
        R_inv = quaternion_to_matrix(q_inv)
        return Pose(q_inv, -(R_inv @ self.translation) / self.scale, 1.0 / self.scale)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.scale * pts @ self.matrix.T + self.translation


def apply_pose(p: Pose, point) -> np.ndarray:
    return p.apply(point)


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray
    extrinsics: np.ndarray = field(default_factory=lambda: np.eye(4))
    width: int = 640
    height: int = 480

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=float).reshape(3, 3)
        T = np.asarray(self.extrinsics, dtype=float).reshape(4, 4)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise GeometryError("extrinsic rotation block is not orthonormal")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)

    @classmethod
    def from_focal(cls, f: float, width: int, height: int, extrinsics=None, cx=None, cy=None) -> "Camera":
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
        return cls(K, np.eye(4) if extrinsics is None else extrinsics, width, height)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def f_avg(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def world_to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]

    def camera_to_world(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.extrinsics[:3, 3]) @ self.extrinsics[:3, :3]

    def project(self, points):
        """Vectorized projection; returns (pixels, depths) with no in-front check."""
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


def project_point(cam: Camera, point_world):
    pc = cam.world_to_camera(np.asarray(point_world, dtype=float).reshape(3))
    z = pc[2]
    if z <= BEHIND_CAMERA_EPS:
        raise GeometryError("behind camera")
    return np.array([cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy]), float(z)


# ---------------------------------------------------------------------------
# torch counterparts used inside the differentiable objective
# ---------------------------------------------------------------------------

def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions (not necessarily unit) -> (..., 3, 3) rotations."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def pose_points_t(q: torch.Tensor, t: torch.Tensor, log_s: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Pose local points. q: (T,4), t: (T,3), pts: (N,3) or (T,N,3) -> (T,N,3)."""
    R = quat_to_rotmat_t(q)
    s = torch.exp(log_s).reshape(-1, 1, 1) if log_s.dim() > 0 else torch.exp(log_s)
    if pts.dim() == 2:
        rotated = torch.einsum("tij,nj->tni", R, pts)
    else:
        rotated = torch.einsum("tij,tnj->tni", R, pts)
    return s * rotated + t[:, None, :]


def project_t(K: torch.Tensor, E: torch.Tensor, pts: torch.Tensor):
    """K: (T,3,3), E: (T,4,4), pts: (T,N,3) world -> (uv (T,N,2), z (T,N))."""
    pc = torch.einsum("tij,tnj->tni", E[:, :3, :3], pts) + E[:, None, :3, 3]
    z = pc[..., 2]
    zs = torch.where(z > BEHIND_CAMERA_EPS, z, torch.ones_like(z))
    u = K[:, None, 0, 0] * pc[..., 0] / zs + K[:, None, 0, 2]
    v = K[:, None, 1, 1] * pc[..., 1] / zs + K[:, None, 1, 2]
    return torch.stack([u, v], dim=-1), z
