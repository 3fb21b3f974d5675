"""Geometric and interaction regularizers for the tracking objective.

Each term has a torch kernel (used inside the optimizer, differentiable in
pose parameters) and a plain wrapper that takes Pose/Camera objects and
returns a float.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import Camera, Pose, fix_quaternion_trajectory

BEHIND_CAMERA_PENALTY = 1e6
FINGERTIP_JOINTS = (4, 8, 12, 16, 20)
N_JOINTS = 21


@dataclass
class HandFrame:
    local_joints: np.ndarray                  # (21, 3) hand-local, meters
    detected_joints_2d: np.ndarray            # (21, 3) u, v, confidence
    local_vertices: Optional[np.ndarray] = None
    contact_flag: bool = False

    def __post_init__(self):
        self.local_joints = np.asarray(self.local_joints, dtype=float).reshape(-1, 3)
        self.detected_joints_2d = np.asarray(self.detected_joints_2d, dtype=float).reshape(-1, 3)
        if len(self.local_joints) != N_JOINTS or len(self.detected_joints_2d) != N_JOINTS:
            raise ValueError(f"hand frames need {N_JOINTS} joints")
        conf = self.detected_joints_2d[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("joint confidences must lie in [0, 1]")
        if self.local_vertices is not None:
            self.local_vertices = np.asarray(self.local_vertices, dtype=float).reshape(-1, 3)

    @property
    def surface(self) -> np.ndarray:
        """Vertices if present, else joints."""
        return self.local_vertices if self.local_vertices is not None else self.local_joints


@dataclass
class Pointmap:
    points: np.ndarray                        # (H, W, 3) world frame
    validity: Optional[np.ndarray] = None     # (H, W) bool

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.validity is None:
            self.validity = np.isfinite(self.points).all(-1)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.validity.shape != self.points.shape[:2]:
            raise ValueError("pointmap validity does not match point dimensions")

    @property
    def shape(self):
        return self.points.shape[:2]

    def depth(self, cam: Optional[Camera] = None) -> np.ndarray:
        """Camera-frame depth per pixel; NaN where invalid."""
        pts = np.asarray(self.points, dtype=np.float64)
        z = pts[..., 2] if cam is None else cam.world_to_camera(pts)[..., 2]
        return np.where(self.validity, z, np.nan)


@dataclass(frozen=True)
class LossWeights:
    j2d: float = 0.5
    depth: float = 1000.0
    sil: float = 100.0
    contact: float = 5000.0
    smooth: float = 100.0
    energy: float = 0.05

    def __post_init__(self):
        for k in ("j2d", "depth", "sil", "contact", "smooth", "energy"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


def _t(x, dtype=torch.float64):
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _pose_tensors(p: Pose):
    return _t(p.rotation)[None], _t(p.translation)[None], _t(np.log(p.scale))


def _cam_tensors(cam: Camera):
    return _t(cam.intrinsics)[None], _t(cam.extrinsics)[None]


# ---------------------------------------------------------------------------
# 2D joints
# ---------------------------------------------------------------------------

def j2d_kernel(uv: torch.Tensor, z: torch.Tensor, detected: torch.Tensor, behind: torch.Tensor) -> torch.Tensor:
    """uv (..., 21, 2), detected (..., 21, 3), behind: bool mask frozen by the caller."""
    conf = detected[..., 2]
    err = ((uv - detected[..., :2]) ** 2).sum(-1)
    err = torch.where(behind, torch.full_like(err, BEHIND_CAMERA_PENALTY), err)
    return (conf * err).sum()


def loss_j2d(hand: HandFrame, pose_h: Pose, cam: Camera) -> float:
    from .geometry import pose_points_t, project_t

    q, t, ls = _pose_tensors(pose_h)
    K, E = _cam_tensors(cam)
    uv, z = project_t(K, E, pose_points_t(q, t, ls, _t(hand.local_joints)))
    return float(j2d_kernel(uv[0], z[0], _t(hand.detected_joints_2d), z[0] <= 1e-9))


# ---------------------------------------------------------------------------
# depth statistics
# ---------------------------------------------------------------------------

def erode(mask, iterations: int = 1) -> np.ndarray:
    mask = np.asarray(mask) != 0
    if iterations <= 0:
        return mask
    return ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), iterations=iterations, border_value=0)


def pointmap_depth_median(pointmap: Pointmap, mask, cam: Optional[Camera] = None, erosion: int = 1):
    """Median pointmap depth inside the eroded mask, or None if no valid pixel remains."""
    m = erode(mask, erosion) & pointmap.validity
    if not m.any():
        return None
    return float(np.median(pointmap.depth(cam)[m]))


def loss_depth(rendered_depth_stats, pointmap: Pointmap, mask_o, mask_h, cam: Optional[Camera] = None,
               erosion: int = 1) -> float:
    """Robust depth term: |mean rendered - median pointmap| per mask.

    ``rendered_depth_stats`` is ``(object_mean, hand_mean)``; a ``None`` mean
    or an empty valid intersection drops that half of the term.
    """
    total = 0.0
    for rendered, mask in zip(rendered_depth_stats, (mask_o, mask_h)):
        if rendered is None or mask is None:
            continue
        med = pointmap_depth_median(pointmap, mask, cam, erosion)
        if med is None:
            continue
        total += abs(float(rendered) - med)
    return total


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------

def grid_shape(width: int, height: int, downsample: int):
    return -(-height // downsample), -(-width // downsample)


def cell_centers(width: int, height: int, downsample: int) -> np.ndarray:
    """Full-resolution coordinates (u, v) of each downsampled cell centre, (h, w, 2)."""
    h, w = grid_shape(width, height, downsample)
    off = 0.5 * (downsample - 1)
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([uu * downsample + off, vv * downsample + off], axis=-1)


def render_silhouette(projected, width: int, height: int, downsample: int = 4) -> np.ndarray:
    """Soft occupancy min(1, sum_j w_j exp(-|u - mu_j|^2 / (2 sigma_j^2))) on the reduced grid."""
    from .energy import _as_arrays

    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    mu, sigma, _, w = _as_arrays(projected)
    h, wd = grid_shape(width, height, downsample)
    occ = np.zeros((h, wd))
    if len(sigma) == 0:
        return occ
    centers = cell_centers(width, height, downsample).reshape(-1, 2)
    for start in range(0, len(sigma), 256):
        sl = slice(start, start + 256)
        d2 = ((centers[:, None, :] - mu[None, sl, :]) ** 2).sum(-1)
        occ += (w[None, sl] * np.exp(-d2 / (2 * sigma[None, sl] ** 2))).sum(1).reshape(h, wd)
    return np.minimum(occ, 1.0)


def downsample_mask(mask, downsample: int) -> np.ndarray:
    """Area-average a binary mask onto the reduced grid (edge cells average their existing pixels)."""
    m = (np.asarray(mask) != 0).astype(float)
    H, W = m.shape
    h, w = grid_shape(W, H, downsample)
    pad = np.zeros((h * downsample, w * downsample))
    cnt = np.zeros_like(pad)
    pad[:H, :W] = m
    cnt[:H, :W] = 1.0
    s = pad.reshape(h, downsample, w, downsample).sum((1, 3))
    c = cnt.reshape(h, downsample, w, downsample).sum((1, 3))
    return s / c


def loss_sil(occupancy, mask_o, downsample: int = 4) -> float:
    occ = np.asarray(occupancy, dtype=float)
    target = np.asarray(mask_o, dtype=float)
    if target.shape != occ.shape:
        target = downsample_mask(mask_o, downsample)
    return float(np.mean((occ - target) ** 2))


# ---------------------------------------------------------------------------
# contact
# ---------------------------------------------------------------------------

def contact_points_local(hand: HandFrame, contact_indices: Optional[Sequence[int]]) -> np.ndarray:
    if contact_indices is None or len(contact_indices) == 0:
        return hand.local_joints[list(FINGERTIP_JOINTS)]
    idx = np.asarray(contact_indices, dtype=int)
    return hand.surface[idx]


def loss_contact(hand: HandFrame, pose_h: Pose, object_points, pose_o: Pose,
                 contact_indices: Optional[Sequence[int]] = None) -> float:
    obj = np.asarray(object_points, dtype=float).reshape(-1, 3)
    if len(obj) == 0:
        raise ValueError("no object surface samples")
    contact = pose_h.apply(contact_points_local(hand, contact_indices))
    d, _ = cKDTree(pose_o.apply(obj)).query(contact)
    return float(np.mean(d ** 2))


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def smooth_kernel(q: torch.Tensor, t: torch.Tensor, signs: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Squared second differences of translations and of unit quaternions.

    ``signs`` (T,) are the frozen sign-consistency flips.
    """
    if len(t) < 3:
        return t.sum() * 0.0
    qn = q / q.norm(dim=-1, keepdim=True)
    if signs is not None:
        qn = qn * signs[:, None]
    acc_t = t[2:] - 2 * t[1:-1] + t[:-2]
    acc_q = qn[2:] - 2 * qn[1:-1] + qn[:-2]
    return (acc_t ** 2).sum() + (acc_q ** 2).sum()


def consistency_signs(q: np.ndarray) -> np.ndarray:
    fixed = fix_quaternion_trajectory(q)
    return np.where(np.sum(fixed * np.asarray(q), axis=1) < 0, -1.0, 1.0)


def loss_smooth(poses: Sequence[Pose]) -> float:
    if len(poses) < 3:
        return 0.0
    q = np.array([p.rotation for p in poses])
    t = np.array([p.translation for p in poses])
    return float(smooth_kernel(_t(q), _t(t), _t(consistency_signs(q))))


# ---------------------------------------------------------------------------
# hand depth alignment
# ---------------------------------------------------------------------------

@dataclass
class HandAlignment:
    scale_factor: float
    translation_delta: np.ndarray
    reference_frame: int
    n_samples: int = 0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _fit_scale_translation(p: np.ndarray, y: np.ndarray):
    """Least squares for y ~ a * p + d with scalar a."""
    pm, ym = p.mean(0), y.mean(0)
    pc, yc = p - pm, y - ym
    den = (pc * pc).sum()
    a = (pc * yc).sum() / den if den > 1e-18 else 1.0
    return a, ym - a * pm


def hand_depth_align(hands: Sequence[HandFrame], hand_poses: Sequence[Pose], pointmaps: Sequence[Pointmap],
                     hand_masks, cams: Sequence[Camera], radius: float = 2.0, max_points: int = 2000,
                     erosion: int = 2, keep_fraction: float = 0.8, iterations: int = 5) -> HandAlignment:
    """Similarity (scale + translation) alignment of the posed hand to pointmap samples.

    The reference frame is the one with the largest hand mask. Pointmap
    samples are taken inside the eroded mask within ``radius`` pixels of
    each projected hand vertex; the fit keeps the best ``keep_fraction`` of
    correspondences and re-solves a few times. Scaling is about the hand root
    translation so the result maps directly onto (s^h, tau^h).
    """
    areas = [int((np.asarray(m) != 0).sum()) if m is not None else 0 for m in hand_masks]
    if max(areas, default=0) == 0:
        raise ValueError("hand depth alignment failed: no hand mask")
    ref = int(np.argmax(areas))
    hand, pose, pm, cam = hands[ref], hand_poses[ref], pointmaps[ref], cams[ref]
    valid = erode(hand_masks[ref], erosion) & pm.validity
    verts = pose.apply(hand.surface)
    uv, z = cam.project(verts)
    H, W = valid.shape
    r = int(np.ceil(radius))
    offsets = [(du, dv) for du in range(-r, r + 1) for dv in range(-r, r + 1) if du * du + dv * dv <= radius * radius]
    vi, pu, pv = [], [], []
    base = np.round(uv).astype(int)
    for du, dv in offsets:
        u = base[:, 0] + du
        v = base[:, 1] + dv
        ok = (z > 1e-9) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        idx = np.flatnonzero(ok)
        ok2 = valid[v[idx], u[idx]]
        idx = idx[ok2]
        vi.append(idx)
        pu.append(u[idx])
        pv.append(v[idx])
    vi = np.concatenate(vi)
    if len(vi) == 0:
        raise ValueError("hand depth alignment failed: no pointmap support")
    pu, pv = np.concatenate(pu), np.concatenate(pv)
    order = np.lexsort((pu, pv, vi))
    vi, pu, pv = vi[order], pu[order], pv[order]
    if len(vi) > max_points:
        keep = np.linspace(0, len(vi) - 1, max_points).round().astype(int)
        vi, pu, pv = vi[keep], pu[keep], pv[keep]
    q = np.asarray(pm.points[pv, pu], dtype=np.float64)
    p = verts[vi] - pose.translation
    y = q - pose.translation
    sel = np.arange(len(p))
    a, d = 1.0, np.zeros(3)
    for _ in range(iterations):
        a, d = _fit_scale_translation(p[sel], y[sel])
        res = np.linalg.norm(a * p + d - y, axis=1)
        n_keep = max(1, int(np.ceil(keep_fraction * len(p))))
        new_sel = np.sort(np.argsort(res, kind="stable")[:n_keep])
        if np.array_equal(new_sel, sel):
            break
        sel = new_sel
    res = np.linalg.norm(a * p + d - y, axis=1)
    return HandAlignment(float(a), d, ref, len(p), res)
