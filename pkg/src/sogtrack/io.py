"""Readers and writers for the on-disk formats.

Formats:
    images        8-bit RGB PNG, read as float in [0, 1]
    masks         8-bit single-channel PNG, nonzero = inside
    pointmaps     raw little-endian float32 H x W x 3 per frame + JSON manifest
                  (H, W, frames, invalid = "nan")
    features      raw little-endian float32 N x d + JSON manifest (N, d, frames)
    cameras       JSON list, one {K, T, width, height} per frame
    hands         JSON {header: {contact_indices, hand_scale}, frames: [...]}
    trajectories  JSON {object_scale, hand_scale, frames: [...], diagnostics}
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .geometry import Camera, Pose
from .priors import HandFrame, Pointmap


class FormatError(ValueError):
    pass


def _p(path) -> Path:
    return Path(path)


def write_json(path, obj) -> None:
    path = _p(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


def read_json(path):
    path = _p(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# images and masks

def write_image(path, rgb) -> None:
    arr = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _p(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    path = _p(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask) -> None:
    _p(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path)


def read_mask(path) -> np.ndarray:
    path = _p(path)
    if not path.exists():
        raise FileNotFoundError(f"missing mask: {path}")
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3:
        a = a[..., 0]
    return a != 0


# ---------------------------------------------------------------------------
# raw float32 arrays

def write_pointmaps(manifest_path, pointmaps: List[np.ndarray], frame_ids: Optional[List[int]] = None) -> None:
    manifest_path = _p(manifest_path)
    root = manifest_path.parent
    root.mkdir(parents=True, exist_ok=True)
    H, W = pointmaps[0].shape[:2]
    frame_ids = list(range(len(pointmaps))) if frame_ids is None else list(frame_ids)
    files = []
    for fid, pm in zip(frame_ids, pointmaps):
        if pm.shape != (H, W, 3):
            raise FormatError(f"pointmap for frame {fid} has shape {pm.shape}, expected {(H, W, 3)}")
        name = f"pointmap_{fid:05d}.f32"
        np.asarray(pm, dtype="<f4").tofile(root / name)
        files.append(name)
    write_json(manifest_path, {"H": H, "W": W, "frames": frame_ids, "files": files, "invalid": "nan"})


def read_pointmaps(manifest_path) -> List[Pointmap]:
    manifest_path = _p(manifest_path)
    meta = read_json(manifest_path)
    H, W = int(meta["H"]), int(meta["W"])
    out = []
    for name in meta["files"]:
        f = manifest_path.parent / name
        if not f.exists():
            raise FileNotFoundError(f"missing pointmap: {f}")
        raw = np.fromfile(f, dtype="<f4")
        if raw.size != H * W * 3:
            raise FormatError(f"{f}: {raw.size} floats, expected H*W*3 = {H * W * 3}")
        out.append(Pointmap(raw.reshape(H, W, 3)))
    return out


def write_features(manifest_path, features, frame_ids=None) -> None:
    manifest_path = _p(manifest_path)
    f = np.asarray(features, dtype="<f4")
    n, d = f.shape
    frame_ids = list(range(n)) if frame_ids is None else [int(x) for x in frame_ids]
    name = manifest_path.with_suffix(".f32").name
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    f.tofile(manifest_path.parent / name)
    write_json(manifest_path, {"N": n, "d": d, "frames": frame_ids, "file": name})


def read_features(manifest_path):
    manifest_path = _p(manifest_path)
    meta = read_json(manifest_path)
    n, d = int(meta["N"]), int(meta["d"])
    f = manifest_path.parent / meta["file"]
    if not f.exists():
        raise FileNotFoundError(f"missing feature file: {f}")
    raw = np.fromfile(f, dtype="<f4")
    if raw.size != n * d:
        raise FormatError(f"{f}: {raw.size} floats, expected N*d = {n * d}")
    return raw.reshape(n, d), list(meta.get("frames", range(n)))


# ---------------------------------------------------------------------------
# cameras, hands, trajectories

def camera_to_dict(cam: Camera) -> Dict:
    return {"K": cam.intrinsics.tolist(), "T": cam.extrinsics.tolist(), "width": int(cam.width), "height": int(cam.height)}


def camera_from_dict(d) -> Camera:
    return Camera(np.array(d["K"], dtype=float), np.array(d["T"], dtype=float), int(d["width"]), int(d["height"]))


def write_cameras(path, cams: List[Camera]) -> None:
    write_json(path, [camera_to_dict(c) for c in cams])


def read_cameras(path) -> List[Camera]:
    data = read_json(path)
    if isinstance(data, dict):
        data = data["cameras"]
    return [camera_from_dict(d) for d in data]


def pose_to_dict(p: Pose) -> Dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def write_hands(path, hands: List[HandFrame], poses: List[Pose], hand_scale: float = 1.0,
                contact_indices: Optional[List[int]] = None) -> None:
    frames = []
    for h, p in zip(hands, poses):
        rec = {
            "local_joints": h.local_joints.tolist(),
            "detected_joints_2d": h.detected_joints_2d.tolist(),
            "rotation": p.rotation.tolist(),
            "translation": p.translation.tolist(),
            "contact_flag": bool(h.contact_flag),
        }
        if h.local_vertices is not None:
            rec["local_vertices"] = h.local_vertices.tolist()
        frames.append(rec)
    write_json(path, {"header": {"contact_indices": contact_indices, "hand_scale": float(hand_scale)},
                      "frames": frames})


def read_hands(path):
    """Returns (hand frames, per-frame poses with the global hand scale, header)."""
    data = read_json(path)
    header = data.get("header", {})
    scale = float(header.get("hand_scale", 1.0) or 1.0)
    hands, poses = [], []
    for i, rec in enumerate(data["frames"]):
        try:
            hands.append(HandFrame(
                local_joints=np.array(rec["local_joints"], dtype=float),
                detected_joints_2d=np.array(rec["detected_joints_2d"], dtype=float),
                local_vertices=np.array(rec["local_vertices"], dtype=float) if rec.get("local_vertices") is not None else None,
                contact_flag=bool(rec.get("contact_flag", False)),
            ))
            poses.append(Pose(np.array(rec["rotation"], dtype=float), np.array(rec["translation"], dtype=float), scale))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: hand frame {i}: {exc}") from exc
    header = {"contact_indices": header.get("contact_indices"), "hand_scale": scale}
    return hands, poses, header


def write_trajectory(path, obj_poses: List[Pose], hand_poses: Optional[List[Pose]] = None,
                     contact_flags: Optional[List[bool]] = None, diagnostics: Optional[Dict] = None) -> None:
    n = len(obj_poses)
    frames = []
    for t in range(n):
        rec = {"object": pose_to_dict(obj_poses[t])}
        if hand_poses is not None:
            rec["hand"] = pose_to_dict(hand_poses[t])
        if contact_flags is not None:
            rec["contact_flag"] = bool(contact_flags[t])
        frames.append(rec)
    write_json(path, {
        "object_scale": float(obj_poses[0].scale) if n else 1.0,
        "hand_scale": float(hand_poses[0].scale) if hand_poses else 1.0,
        "frames": frames,
        "diagnostics": diagnostics or {},
    })


def read_trajectory(path):
    """Returns (object poses, hand poses or None, contact flags or None, diagnostics)."""
    data = read_json(path)
    s_o = float(data.get("object_scale", 1.0))
    s_h = float(data.get("hand_scale", 1.0))
    obj, hand, flags = [], [], []
    for rec in data["frames"]:
        o = rec["object"]
        obj.append(Pose(np.array(o["rotation"], dtype=float), np.array(o["translation"], dtype=float), s_o))
        if "hand" in rec:
            h = rec["hand"]
            hand.append(Pose(np.array(h["rotation"], dtype=float), np.array(h["translation"], dtype=float), s_h))
        if "contact_flag" in rec:
            flags.append(bool(rec["contact_flag"]))
    return obj, (hand or None), (flags or None), data.get("diagnostics", {})
