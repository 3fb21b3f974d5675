"""Hand-object reconstruction metrics.

Distances are computed in meters and converted at the output boundary:
Chamfer in cm, MPJPE and MRRPE in mm, acceleration in m/s^2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.spatial import cKDTree

FAILURE_CD_H_CM = 1000.0
CD_CONVENTION = "symmetric mean of unsquared nearest-neighbour L2 distances over vertex sets"


def _points(a, name="point set") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must be M x 3, got shape {a.shape}")
    if len(a) == 0:
        raise ValueError(f"empty {name}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def nn_distances(a, b) -> np.ndarray:
    """Distance from each point of a to its nearest point of b."""
    return cKDTree(b).query(a)[0]


def chamfer_distance(a, b) -> float:
    a, b = _points(a), _points(b)
    return 0.5 * (nn_distances(a, b).mean() + nn_distances(b, a).mean())


def f_score(a, b, threshold: float = 0.010) -> float:
    """F-score in percent between prediction a and ground truth b."""
    a, b = _points(a), _points(b)
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    precision = float((nn_distances(a, b) <= threshold).mean())
    recall = float((nn_distances(b, a) <= threshold).mean())
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# similarity ICP

@dataclass
class SimilarityTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    residual: float = 0.0
    history: list = field(default_factory=list)

    def apply(self, pts) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def umeyama(src, dst, with_scale: bool = True):
    """Closed-form similarity (R, t, s) minimizing sum |s R src + t - dst|^2."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign[-1] = -1
    R = U @ np.diag(sign) @ Vt
    var_s = (xs ** 2).sum() / len(src)
    s = float((D * sign).sum() / var_s) if with_scale else 1.0
    return R, mu_d - s * R @ mu_s, s


def _is_degenerate(pts) -> bool:
    if len(pts) < 3:
        return True
    sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    return sv[1] <= 1e-9 * max(sv[0], 1e-300)


def icp_align(source, target, max_iters: int = 50, tol: float = 1e-6, with_scale: bool = True) -> SimilarityTransform:
    """Nearest-neighbour ICP with a closed-form similarity fit per iteration.

    Starts from centroid alignment. Stops after ``max_iters`` or when the
    mean residual improves by less than ``tol``. The transform kept is the
    best one seen, so the reported residual history is non-increasing.
    """
    src, dst = _points(source, "source"), _points(target, "target")
    if _is_degenerate(src):
        raise ValueError("degenerate source: fewer than 3 non-collinear points")
    tree = cKDTree(dst)
    R, t, s = np.eye(3), dst.mean(0) - src.mean(0), 1.0
    cur = s * src @ R.T + t
    d, idx = tree.query(cur)
    best = SimilarityTransform(R, t, s, float(d.mean()))
    history = [best.residual]
    for _ in range(max_iters):
        R, t, s = umeyama(src, dst[idx], with_scale)
        cur = s * src @ R.T + t
        d, idx = tree.query(cur)
        res = float(d.mean())
        improved = history[-1] - res
        if res < best.residual:
            best = SimilarityTransform(R, t, s, res)
        history.append(min(res, history[-1]))
        if improved < tol:
            break
    best.history = history
    return best


# ---------------------------------------------------------------------------
# hand and trajectory metrics

def mpjpe(pred_joints, gt_joints) -> float:
    """Root-relative mean per-joint position error in mm (joint 0 is the root)."""
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3 or p.shape[-1] != 3:
        raise ValueError(f"joint arrays must share a T x J x 3 shape, got {p.shape} and {g.shape}")
    p = p - p[:, :1]
    g = g - g[:, :1]
    return 1000.0 * float(np.linalg.norm(p - g, axis=-1).mean())


def cd_hand_relative(pred_obj, pred_hand_root, gt_obj, gt_hand_root) -> float:
    """Per-frame Chamfer of hand-root-relative object points, averaged, in cm."""
    pr = np.asarray(pred_hand_root, dtype=np.float64)
    gr = np.asarray(gt_hand_root, dtype=np.float64)
    if len(pred_obj) != len(gt_obj) or pr.shape != gr.shape or len(pr) != len(pred_obj):
        raise ValueError("frame counts of objects and hand roots differ")
    vals = [chamfer_distance(np.asarray(po) - pr[t], np.asarray(go) - gr[t])
            for t, (po, go) in enumerate(zip(pred_obj, gt_obj))]
    return 100.0 * float(np.mean(vals))


def acceleration_error(pred_traj, gt_traj, fps: float = 30.0) -> float:
    """Mean norm of the difference of second finite differences, times fps^2 (m/s^2)."""
    p = np.asarray(pred_traj, dtype=np.float64)
    g = np.asarray(gt_traj, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    if len(p) < 3:
        raise ValueError("acceleration needs at least 3 frames")
    ap = p[2:] - 2 * p[1:-1] + p[:-2]
    ag = g[2:] - 2 * g[1:-1] + g[:-2]
    return float(np.linalg.norm(ap - ag, axis=-1).mean() * fps ** 2)


def mrrpe(pred_hand_root, pred_obj_root, gt_hand_root, gt_obj_root) -> float:
    """Mean error of the hand-to-object root offset, in mm."""
    arrs = [np.asarray(x, dtype=np.float64) for x in (pred_hand_root, pred_obj_root, gt_hand_root, gt_obj_root)]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError("root trajectories must share one T x 3 shape")
    ph, po, gh, go = arrs
    return 1000.0 * float(np.linalg.norm((po - ph) - (go - gh), axis=-1).mean())


@dataclass
class MetricReport:
    cd_cm: float = float("nan")
    f10_pct: float = float("nan")
    mpjpe_mm: float = float("nan")
    cd_h_cm: float = float("nan")
    acc_h: float = float("nan")
    acc_o: float = float("nan")
    mrrpe_mm: float = float("nan")
    success: bool = True
    errors: list = field(default_factory=list)
    metadata: Dict = field(default_factory=lambda: {"cd": CD_CONVENTION, "hand_root": "joint 0",
                                                    "object_root": "centroid of object points"})

    def finalize(self) -> "MetricReport":
        failed = bool(self.errors) or (np.isfinite(self.cd_h_cm) and self.cd_h_cm >= FAILURE_CD_H_CM)
        self.success = not failed
        return self

    def to_dict(self) -> Dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def template_quality(pred_points, gt_points, threshold: float = 0.010, icp_iters: int = 50):
    """ICP-align the predicted template to ground truth, then Chamfer (cm) and F-score (%)."""
    tf = icp_align(pred_points, gt_points, max_iters=icp_iters)
    aligned = tf.apply(pred_points)
    return 100.0 * chamfer_distance(aligned, gt_points), f_score(aligned, gt_points, threshold), tf
