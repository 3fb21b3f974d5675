"""Sequence ingestion, end-to-end tracking and evaluation over a whole clip."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import io
from .config import Config
from .geometry import Camera, Pose, fix_quaternion_trajectory
from .image_sog import EmptyMaskError, ImageSoG, build_image_sog
from .metrics import (
    MetricReport,
    acceleration_error,
    cd_hand_relative,
    mpjpe,
    mrrpe,
    template_quality,
)
from .object_sog import DenseGaussianAsset, ObjectSoG, read_asset_ply, read_points_ply, to_object_sog
from .objective import FrameData, ParamBlocks, SceneModel, WindowProblem
from .optimizer import OptimState, slide_windows
from .priors import HandFrame, Pointmap, erode, hand_depth_align, pointmap_depth_median

log = logging.getLogger(__name__)

HAND_BLOCKS = ("hand_q", "hand_t", "hand_log_s")
MAX_EVAL_POINTS = 4000


class SequenceError(ValueError):
    """A manifest entry is missing, unreadable or inconsistent."""


@dataclass
class Sequence:
    root: Path
    n_frames: int
    frame_ids: List[int]
    fps: float
    seed: int
    images: List[np.ndarray]
    object_masks: List[np.ndarray]
    hand_masks: List[Optional[np.ndarray]]
    pointmaps: List[Pointmap]
    cams: List[Camera]
    asset: DenseGaussianAsset
    hands: Optional[List[HandFrame]] = None
    hand_poses: Optional[List[Pose]] = None
    contact_indices: Optional[List[int]] = None
    features: Optional[np.ndarray] = None
    init_obj_poses: List[Pose] = field(default_factory=list)
    init_source: str = "pointmap-median"


@dataclass
class Trajectory:
    obj_poses: List[Pose]
    hand_poses: Optional[List[Pose]] = None
    contact_flags: Optional[List[bool]] = None
    diagnostics: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.obj_poses)

    @property
    def obj_scale(self) -> float:
        return float(self.obj_poses[0].scale) if self.obj_poses else 1.0

    @property
    def hand_scale(self) -> float:
        return float(self.hand_poses[0].scale) if self.hand_poses else 1.0

    def write(self, path) -> None:
        io.write_trajectory(path, self.obj_poses, self.hand_poses, self.contact_flags, self.diagnostics)

    @classmethod
    def read(cls, path) -> "Trajectory":
        obj, hand, flags, diag = io.read_trajectory(path)
        return cls(obj, hand, flags, diag)


# ---------------------------------------------------------------------------
# loading

def _resolve(root: Path, rel, what: str) -> Path:
    if rel is None:
        raise SequenceError(f"manifest has no entry for {what}")
    p = Path(rel)
    p = p if p.is_absolute() else root / p
    if not p.exists():
        raise SequenceError(f"{what}: missing file {p}")
    return p


def _per_frame(manifest, key, n, required=True):
    files = manifest.get(key)
    if files is None:
        if required:
            raise SequenceError(f"manifest has no '{key}' list")
        return None
    if len(files) != n:
        raise SequenceError(f"'{key}' lists {len(files)} files, expected n_frames = {n}")
    return files


def pointmap_translation(pointmap: Pointmap, mask, erosion: int = 1) -> Optional[np.ndarray]:
    """Component-wise median of the valid pointmap points inside the eroded mask."""
    m = erode(mask, erosion) & pointmap.validity
    if not m.any():
        m = (np.asarray(mask) != 0) & pointmap.validity
    if not m.any():
        return None
    return np.median(np.asarray(pointmap.points, dtype=np.float64)[m], axis=0)


def default_initial_poses(pointmaps, masks) -> List[Pose]:
    """Identity rotations, pointmap-median translations, unit scale.

    Frames without a valid object pixel borrow the nearest frame's translation.
    """
    trans = [pointmap_translation(pm, m) for pm, m in zip(pointmaps, masks)]
    known = [t for t, x in enumerate(trans) if x is not None]
    if not known:
        raise SequenceError("no frame has valid pointmap samples inside its object mask")
    poses = []
    for t, x in enumerate(trans):
        if x is None:
            x = trans[min(known, key=lambda k: (abs(k - t), k))]
        poses.append(Pose(np.array([1.0, 0, 0, 0]), x, 1.0))
    return poses


def load_sequence(manifest_path) -> Sequence:
    """Parse a manifest and every file it references, checking dimensions frame by frame."""
    manifest_path = Path(manifest_path)
    try:
        man = io.read_json(manifest_path)
    except FileNotFoundError as exc:
        raise SequenceError(str(exc)) from exc
    except io.FormatError as exc:
        raise SequenceError(str(exc)) from exc
    if not isinstance(man, dict):
        raise SequenceError(f"{manifest_path}: manifest must be a JSON object")
    root = manifest_path.parent
    if "n_frames" not in man:
        raise SequenceError("manifest has no 'n_frames'")
    n = int(man["n_frames"])
    if n < 1:
        raise SequenceError("n_frames must be >= 1")
    frame_ids = [int(x) for x in man.get("frames", range(n))]
    if len(frame_ids) != n:
        raise SequenceError(f"'frames' lists {len(frame_ids)} ids, expected n_frames = {n}")

    img_files = _per_frame(man, "images", n)
    om_files = _per_frame(man, "object_masks", n)
    hm_files = _per_frame(man, "hand_masks", n, required=False)

    images, omasks, hmasks = [], [], []
    for t in range(n):
        img = io.read_image(_resolve(root, img_files[t], f"frame {t} image"))
        H, W = img.shape[:2]
        om_path = _resolve(root, om_files[t], f"frame {t} object mask")
        om = io.read_mask(om_path)
        if om.shape != (H, W):
            raise SequenceError(f"frame {t}: object mask {om_path} is {om.shape}, expected image size {(H, W)}")
        hm = None
        if hm_files is not None and hm_files[t] is not None:
            hm_path = _resolve(root, hm_files[t], f"frame {t} hand mask")
            hm = io.read_mask(hm_path)
            if hm.shape != (H, W):
                raise SequenceError(f"frame {t}: hand mask {hm_path} is {hm.shape}, expected image size {(H, W)}")
        images.append(img)
        omasks.append(om)
        hmasks.append(hm)

    pm_path = _resolve(root, man.get("pointmaps"), "pointmaps")
    try:
        pointmaps = io.read_pointmaps(pm_path)
    except (FileNotFoundError, io.FormatError) as exc:
        raise SequenceError(str(exc)) from exc
    if len(pointmaps) != n:
        raise SequenceError(f"{pm_path}: {len(pointmaps)} pointmaps, expected n_frames = {n}")
    for t, pm in enumerate(pointmaps):
        if pm.shape != images[t].shape[:2]:
            raise SequenceError(f"frame {t}: pointmap is {pm.shape}, expected image size {images[t].shape[:2]}")

    cam_path = _resolve(root, man.get("cameras"), "cameras")
    cams = io.read_cameras(cam_path)
    if len(cams) == 1 and n > 1:
        cams = cams * n
    if len(cams) != n:
        raise SequenceError(f"{cam_path}: {len(cams)} cameras, expected n_frames = {n}")
    for t, cam in enumerate(cams):
        if (cam.height, cam.width) != images[t].shape[:2]:
            raise SequenceError(f"frame {t}: camera is {cam.width}x{cam.height}, image is "
                                f"{images[t].shape[1]}x{images[t].shape[0]}")

    asset = read_asset_ply(_resolve(root, man.get("asset"), "asset"))

    hands = hand_poses = contact_indices = None
    if man.get("hand") is not None:
        hand_path = _resolve(root, man["hand"], "hand trajectory")
        hands, hand_poses, header = io.read_hands(hand_path)
        if len(hands) != n:
            raise SequenceError(f"{hand_path}: {len(hands)} hand frames, expected n_frames = {n}")
        contact_indices = header.get("contact_indices")

    features = None
    if man.get("features") is not None:
        feat_path = _resolve(root, man["features"], "features")
        features, _ = io.read_features(feat_path)
        if len(features) != n:
            raise SequenceError(f"{feat_path}: {len(features)} feature rows, expected n_frames = {n}")

    if man.get("init_trajectory") is not None:
        init_path = _resolve(root, man["init_trajectory"], "initial object trajectory")
        init, _, _, _ = io.read_trajectory(init_path)
        if len(init) != n:
            raise SequenceError(f"{init_path}: {len(init)} poses, expected n_frames = {n}")
        source = "file"
    else:
        init = default_initial_poses(pointmaps, omasks)
        source = "pointmap-median"

    return Sequence(root, n, frame_ids, float(man.get("fps", 30.0)), int(man.get("seed", 0)), images, omasks,
                    hmasks, pointmaps, cams, asset, hands, hand_poses, contact_indices, features, init, source)


# ---------------------------------------------------------------------------
# tracking

def build_image_sogs(seq: Sequence, cfg: Config, workers: Optional[int] = None) -> List[ImageSoG]:
    def one(t):
        try:
            return build_image_sog(seq.images[t], seq.object_masks[t], cfg.quadtree, source_frame=t)
        except EmptyMaskError:
            return ImageSoG.from_gaussians([], source_frame=t)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(seq.n_frames)))


def build_frames(seq: Sequence, cfg: Config, image_sogs: Optional[List[ImageSoG]] = None) -> List[FrameData]:
    image_sogs = build_image_sogs(seq, cfg) if image_sogs is None else image_sogs
    erosion = cfg.priors.depth_erosion
    frames = []
    for t in range(seq.n_frames):
        cam, pm = seq.cams[t], seq.pointmaps[t]
        hm = seq.hand_masks[t]
        hand = seq.hands[t] if seq.hands is not None else None
        d_o = pointmap_depth_median(pm, seq.object_masks[t], cam, erosion)
        d_h = pointmap_depth_median(pm, hm, cam, erosion) if (hand is not None and hm is not None) else None
        frames.append(FrameData(t, cam, image_sogs[t], seq.object_masks[t], hm, hand, d_o, d_h))
    return frames


def initial_params(seq: Sequence) -> ParamBlocks:
    obj = seq.init_obj_poses
    if seq.hand_poses is not None:
        hq = [p.rotation for p in seq.hand_poses]
        ht = [p.translation for p in seq.hand_poses]
        hs = float(np.log(seq.hand_poses[0].scale))
    else:
        hq = np.tile([1.0, 0, 0, 0], (seq.n_frames, 1))
        ht = np.zeros((seq.n_frames, 3))
        hs = 0.0
    return ParamBlocks([p.rotation for p in obj], [p.translation for p in obj], float(np.log(obj[0].scale)),
                       hq, ht, hs)


def params_to_trajectory(params: ParamBlocks, seq: Sequence, diagnostics: Dict) -> Trajectory:
    s_o = float(np.exp(params.obj_log_s))
    obj = [Pose(params.obj_q[t], params.obj_t[t], s_o) for t in range(len(params))]
    hand = flags = None
    if seq.hands is not None:
        s_h = float(np.exp(params.hand_log_s))
        hand = [Pose(params.hand_q[t], params.hand_t[t], s_h) for t in range(len(params))]
        flags = [bool(h.contact_flag) for h in seq.hands]
    return Trajectory(obj, hand, flags, diagnostics)


def align_hands(seq: Sequence, params: ParamBlocks, cfg: Config, diagnostics: Dict) -> ParamBlocks:
    """One-off similarity alignment of the hand track to the pointmaps."""
    if seq.hands is None or not cfg.priors.hand_align:
        return params
    pr = cfg.priors
    try:
        al = hand_depth_align(seq.hands, seq.hand_poses, seq.pointmaps, seq.hand_masks, seq.cams,
                              radius=pr.hand_align_radius, max_points=pr.hand_align_max_points,
                              erosion=pr.hand_align_erosion, keep_fraction=pr.hand_align_keep)
    except ValueError as exc:
        diagnostics["hand_align"] = {"applied": False, "reason": str(exc)}
        return params
    out = params.copy()
    out.hand_log_s = params.hand_log_s + float(np.log(al.scale_factor))
    out.hand_t = params.hand_t + al.translation_delta[None]
    diagnostics["hand_align"] = {"applied": True, "scale_factor": al.scale_factor,
                                 "translation_delta": al.translation_delta.tolist(),
                                 "reference_frame": al.reference_frame, "samples": al.n_samples}
    return out


def optim_state_factory(cfg: Config) -> Callable[[], OptimState]:
    a = cfg.adamw
    return lambda: OptimState(lr=dict(a.lr), beta1=a.beta1, beta2=a.beta2, weight_decay=a.weight_decay, eps=a.eps)


def run_tracking(seq: Sequence, cfg: Config = Config(), callback=None,
                 object_sog: Optional[ObjectSoG] = None) -> Trajectory:
    """Refine object and hand poses over the whole clip with sliding windows.

    Failed windows keep their incoming poses and are listed under
    ``diagnostics["failed_windows"]``; the trajectory is still returned.
    """
    t0 = time.perf_counter()
    diagnostics: Dict = {"init_source": seq.init_source}
    frames = build_frames(seq, cfg)
    if object_sog is None:
        o = cfg.object_sog
        object_sog = to_object_sog(seq.asset, o.count, o.sigma_factor, o.min_opacity)
    params = initial_params(seq)
    params = align_hands(seq, params, cfg, diagnostics)
    scene = SceneModel(object_sog, cfg.energy, cfg.weights, seq.contact_indices, cfg.priors.sil_downsample,
                       cfg.priors.gating)
    freeze = HAND_BLOCKS if seq.hands is None else ()
    windows = []

    def record(w_idx, s, e, res):
        if isinstance(res, Exception):
            windows.append({"window": w_idx, "start": s, "end": e, "failed": True, "error": str(res)})
        else:
            windows.append({"window": w_idx, "start": s, "end": e, "failed": False, "improved": res.improved,
                            "trace": res.trace, "terms": res.term_trace, "stats": res.stats})
        if callback is not None:
            callback(w_idx, s, e, res)

    refined, _ = slide_windows(params, lambda s, e: WindowProblem(frames[s:e], scene), cfg.window,
                               optim_state_factory(cfg), freeze, record, fail_soft=True)
    refined.obj_q = fix_quaternion_trajectory(refined.obj_q)
    refined.hand_q = fix_quaternion_trajectory(refined.hand_q)
    elapsed = time.perf_counter() - t0
    failed = [w for w in windows if w["failed"]]
    diagnostics.update({
        "windows": windows,
        "failed_windows": [(w["start"], w["end"]) for w in failed],
        "success": not failed,
        "runtime_seconds": elapsed,
        "runtime_hours_per_100_frames": elapsed / 3600.0 * 100.0 / seq.n_frames,
        "image_gaussians_per_frame": [len(f.image_sog) for f in frames],
        "visible_fraction": [w["stats"].get("visible_fraction") for w in windows if not w["failed"]],
    })
    return params_to_trajectory(refined, seq, diagnostics)


def write_diagnostics_csv(path, traj: Trajectory) -> None:
    """One row per (window, iteration) with the total objective and each unweighted term."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    windows = traj.diagnostics.get("windows", [])
    term_names = sorted({k for w in windows if not w["failed"] for d in w["terms"] for k in d})
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["window", "start", "end", "iteration", "objective", *term_names])
        for w in windows:
            if w["failed"]:
                continue
            for it, (val, terms) in enumerate(zip(w["trace"], w["terms"])):
                wr.writerow([w["window"], w["start"], w["end"], it, val, *[terms.get(k, "") for k in term_names]])


# ---------------------------------------------------------------------------
# evaluation

def eval_points(points, max_points: int = MAX_EVAL_POINTS) -> np.ndarray:
    """Deterministic even subsample used for per-frame object point sets."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) <= max_points:
        return points
    return points[np.linspace(0, len(points) - 1, max_points).round().astype(int)]


def run_eval(pred: Trajectory, gt: Trajectory, pred_points, gt_points, hands: Optional[List[HandFrame]] = None,
             fps: float = 30.0) -> MetricReport:
    """All metrics of a predicted clip against ground truth.

    ``pred_points`` / ``gt_points`` are canonical object points; per-frame
    object sets are these posed by each trajectory. Hand joints come from the
    per-frame local joints posed by each hand trajectory. Each metric that
    raises is recorded in ``errors`` and the report is marked unsuccessful.
    """
    rep = MetricReport()
    if len(pred) != len(gt):
        rep.errors.append(f"frame count mismatch: prediction {len(pred)}, ground truth {len(gt)}")
        return rep.finalize()
    pred_points, gt_points = eval_points(pred_points), eval_points(gt_points)

    def attempt(name, fn):
        try:
            return fn()
        except Exception as exc:  # recorded, not raised: one metric must not hide the others
            rep.errors.append(f"{name}: {exc}")
            return float("nan")

    def template():
        cd, f10, _ = template_quality(pred.obj_scale * pred_points, gt.obj_scale * gt_points)
        rep.f10_pct = f10
        return cd

    rep.cd_cm = attempt("cd", template)
    po = [p.apply(pred_points) for p in pred.obj_poses]
    go = [p.apply(gt_points) for p in gt.obj_poses]
    po_root = np.array([x.mean(0) for x in po])
    go_root = np.array([x.mean(0) for x in go])
    rep.acc_o = attempt("acc_o", lambda: acceleration_error(po_root, go_root, fps))
    if hands is not None and pred.hand_poses is not None and gt.hand_poses is not None:
        pj = np.array([p.apply(h.local_joints) for p, h in zip(pred.hand_poses, hands)])
        gj = np.array([p.apply(h.local_joints) for p, h in zip(gt.hand_poses, hands)])
        rep.mpjpe_mm = attempt("mpjpe", lambda: mpjpe(pj, gj))
        rep.cd_h_cm = attempt("cd_h", lambda: cd_hand_relative(po, pj[:, 0], go, gj[:, 0]))
        rep.acc_h = attempt("acc_h", lambda: acceleration_error(pj[:, 0], gj[:, 0], fps))
        rep.mrrpe_mm = attempt("mrrpe", lambda: mrrpe(pj[:, 0], po_root, gj[:, 0], go_root))
    return rep.finalize()


def run_eval_files(pred_path, gt_path, manifest_path=None, gt_points_path=None) -> MetricReport:
    """File-level evaluation; the manifest supplies the asset, hands and fps."""
    for what, p in (("prediction", pred_path), ("ground truth", gt_path)):
        if not Path(p).exists():
            raise SequenceError(f"{what}: missing file {p}")
    pred, gt = Trajectory.read(pred_path), Trajectory.read(gt_path)
    hands, fps, pred_points = None, 30.0, None
    if manifest_path is not None:
        man_path = Path(manifest_path)
        man = io.read_json(man_path)
        fps = float(man.get("fps", 30.0))
        pred_points = read_asset_ply(_resolve(man_path.parent, man.get("asset"), "asset")).centers
        if man.get("hand") is not None:
            hands, _, _ = io.read_hands(_resolve(man_path.parent, man["hand"], "hand trajectory"))
    if gt_points_path is None:
        gt_points_path = Path(gt_path).parent / "object_points.ply"
    if not Path(gt_points_path).exists():
        raise SequenceError(f"ground-truth object points: missing file {gt_points_path}")
    gt_points = read_points_ply(gt_points_path)
    if pred_points is None:
        pred_points = gt_points
    return run_eval(pred, gt, pred_points, gt_points, hands, fps)
