"""Synthetic sequences with exact ground truth, written in the ingestion formats.

The object is a dense Gaussian asset with a piecewise-constant colour
texture. Frames are rendered by opaque splatting in painter's order (each
splat is a flat disc at its centre depth); the hand is a camera-facing disc
occluder in front of the object.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import io
from .geometry import (
    Camera,
    Pose,
    axis_angle_to_quaternion,
    quaternion_multiply,
    quaternion_slerp,
)
from .object_sog import DenseGaussianAsset, write_asset_ply, write_points_ply
from .priors import HandFrame, Pointmap

SKIN = np.array([0.86, 0.64, 0.52])
BACKGROUND = np.array([0.08, 0.08, 0.1])
BACKGROUND_DEPTH = 2.0
HAND_GAP = 0.06


@dataclass
class SynthSpec:
    n_dense: int = 6000
    shape: str = "box"                     # box | card | blob
    size: tuple = (0.20, 0.14, 0.07)
    n_patches: int = 10
    n_frames: int = 8
    width: int = 256
    height: int = 256
    focal: float = 320.0
    depth: float = 0.65
    trajectory: str = "smooth"             # smooth | static
    translation_amplitude: float = 0.03
    rotation_amplitude_deg: float = 20.0
    depth_noise: float = 0.0
    joint_noise_px: float = 0.0
    occluder_coverage: Optional[float] = None   # fraction of the object mask hidden by the hand disc
    contact: bool = False
    seed: int = 0


@dataclass
class SynthScene:
    spec: SynthSpec
    asset: DenseGaussianAsset
    cams: List[Camera]
    obj_poses: List[Pose]
    hand_poses: Optional[List[Pose]]
    hands: Optional[List[HandFrame]]
    images: List[np.ndarray]
    obj_masks: List[np.ndarray]
    hand_masks: List[np.ndarray]
    pointmaps: List[Pointmap]
    occlusion: List[float] = field(default_factory=list)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.asarray(self.spec.size))) * self.obj_poses[0].scale


# ---------------------------------------------------------------------------
# object

def _surface_samples(rng, shape, size, n):
    a, b, c = (0.5 * np.asarray(size, dtype=float))
    if shape == "box":
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        p = rng.uniform(-1, 1, size=(n, 3)) * np.array([a, b, c])
        normals = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        p[np.arange(n), axis] = sign * np.array([a, b, c])[axis]
        normals[np.arange(n), axis] = sign
        return p, normals
    if shape == "card":
        p = np.stack([rng.uniform(-a, a, n), rng.uniform(-b, b, n), np.zeros(n)], axis=1)
        return p, np.tile([0.0, 0.0, -1.0], (n, 1))
    if shape == "blob":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * np.array([a, b, c]), d
    raise ValueError(f"unknown shape {shape!r}")


def make_object(spec: SynthSpec, rng) -> DenseGaussianAsset:
    pts, normals = _surface_samples(rng, spec.shape, spec.size, spec.n_dense)
    anchors = _surface_samples(rng, spec.shape, spec.size, spec.n_patches)[0]
    palette = rng.uniform(0.1, 0.95, size=(spec.n_patches, 3))
    label = np.argmin(((pts[:, None, :] - anchors[None]) ** 2).sum(-1), axis=1)
    colors = palette[label]
    area = {"box": 2 * (spec.size[0] * spec.size[1] + spec.size[1] * spec.size[2] + spec.size[0] * spec.size[2]),
            "card": spec.size[0] * spec.size[1],
            "blob": 4 * np.pi * (np.prod(spec.size) / 8) ** (2 / 3)}[spec.shape]
    spacing = np.sqrt(area / spec.n_dense)
    tangent = 0.6 * spacing * np.exp(rng.normal(0, 0.15, size=spec.n_dense))
    scales = np.stack([tangent, tangent, 0.3 * tangent], axis=1)
    # align each splat's thin axis with the surface normal
    z = np.array([0.0, 0.0, 1.0])
    rots = []
    for nrm in normals:
        axis = np.cross(z, nrm)
        s = np.linalg.norm(axis)
        angle = np.arctan2(s, np.dot(z, nrm))
        rots.append(axis_angle_to_quaternion(axis if s > 1e-12 else [1.0, 0, 0], angle if s > 1e-12 else (0.0 if nrm[2] > 0 else np.pi)))
    opac = np.full(spec.n_dense, 0.95)
    return DenseGaussianAsset.from_activated(pts, scales, np.array(rots), opac, colors)


# ---------------------------------------------------------------------------
# trajectory

def _random_rotation(rng, max_deg):
    axis = rng.normal(size=3)
    return axis_angle_to_quaternion(axis, np.deg2rad(rng.uniform(0.5, 1.0) * max_deg))


def make_trajectory(spec: SynthSpec, rng) -> List[Pose]:
    n = spec.n_frames
    base = quaternion_multiply(axis_angle_to_quaternion([1, 0, 0], np.deg2rad(rng.uniform(20, 40))),
                               axis_angle_to_quaternion([0, 1, 0], np.deg2rad(rng.uniform(-30, 30))))
    base = quaternion_multiply(axis_angle_to_quaternion([0, 0, 1], rng.uniform(0, 2 * np.pi)), base)
    center = np.array([0.0, 0.0, spec.depth])
    if spec.trajectory == "static" or n == 1:
        return [Pose(base, center) for _ in range(n)]
    end = quaternion_multiply(_random_rotation(rng, spec.rotation_amplitude_deg), base)
    # cubic Hermite through random control offsets: smooth in translation
    ctrl = rng.normal(0, spec.translation_amplitude / 2, size=(4, 3))
    ctrl[:, 2] *= 0.5
    s = np.linspace(0, 1, n)
    bern = np.stack([(1 - s) ** 3, 3 * s * (1 - s) ** 2, 3 * s ** 2 * (1 - s), s ** 3], axis=1)
    trans = center + bern @ ctrl
    return [Pose(quaternion_slerp(base, end, float(u)), tr) for u, tr in zip(s, trans)]


# ---------------------------------------------------------------------------
# rendering

def _splat_pixels(uv, radius, width, height):
    """(splat index, pixel index) pairs for pixels whose centre lies within each disc."""
    js, ps = [], []
    rmax = np.ceil(radius).astype(int)
    for r in np.unique(rmax):
        sel = np.flatnonzero(rmax == r)
        du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
        du, dv = du.ravel(), dv.ravel()
        cu = np.rint(uv[sel, 0]).astype(int)[:, None] + du[None]
        cv = np.rint(uv[sel, 1]).astype(int)[:, None] + dv[None]
        d2 = (cu - uv[sel, 0:1]) ** 2 + (cv - uv[sel, 1:2]) ** 2
        ok = (d2 <= radius[sel, None] ** 2) & (cu >= 0) & (cu < width) & (cv >= 0) & (cv < height)
        js.append(np.broadcast_to(sel[:, None], cu.shape)[ok])
        ps.append((cv * width + cu)[ok])
    if not js:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(js), np.concatenate(ps)


def render_frame(asset: DenseGaussianAsset, pose: Pose, cam: Camera, hand_disc=None):
    """Painter's-order splatting. Returns rgb, depth, object mask, hand mask.

    ``hand_disc`` is (centre_world, radius_m, colour) for a camera-facing disc.
    """
    W, H = cam.width, cam.height
    world = pose.apply(asset.centers)
    uv, z = cam.project(world)
    front = np.flatnonzero(z > 1e-6)
    rad_px = np.maximum(0.7, 2.0 * cam.f_avg * pose.scale * asset.scales[front].max(1) / z[front])
    j, pix = _splat_pixels(uv[front], rad_px, W, H)
    depth_c = z[front][j]
    color_c = asset.colors[front][j]
    kind = np.zeros(len(j), dtype=np.int8)
    if hand_disc is not None:
        hc, hr, hcol = hand_disc
        huv, hz = cam.project(np.asarray(hc)[None])
        rpx = cam.f_avg * hr / hz[0]
        vv, uu = np.mgrid[0:H, 0:W]
        inside = np.flatnonzero(((uu - huv[0, 0]) ** 2 + (vv - huv[0, 1]) ** 2).ravel() <= rpx ** 2)
        pix = np.concatenate([pix, inside])
        depth_c = np.concatenate([depth_c, np.full(len(inside), hz[0])])
        color_c = np.concatenate([color_c, np.tile(hcol, (len(inside), 1))])
        kind = np.concatenate([kind, np.ones(len(inside), dtype=np.int8)])
    order = np.lexsort((depth_c, pix))
    pix_s = pix[order]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    rgb = np.tile(BACKGROUND, (H * W, 1))
    depth = np.full(H * W, BACKGROUND_DEPTH)
    mo = np.zeros(H * W, dtype=bool)
    mh = np.zeros(H * W, dtype=bool)
    rgb[pix[win]] = color_c[win]
    depth[pix[win]] = depth_c[win]
    mo[pix[win]] = kind[win] == 0
    mh[pix[win]] = kind[win] == 1
    return rgb.reshape(H, W, 3), depth.reshape(H, W), mo.reshape(H, W), mh.reshape(H, W)


def depth_to_pointmap(depth: np.ndarray, cam: Camera) -> np.ndarray:
    H, W = depth.shape
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    x = (uu - cam.cx) / cam.fx * depth
    y = (vv - cam.cy) / cam.fy * depth
    return cam.camera_to_world(np.stack([x, y, depth], axis=-1))


# ---------------------------------------------------------------------------
# hand disc

def hand_geometry(radius: float):
    """21 joints and a vertex set on a unit-facing disc of the given radius (hand-local)."""
    ang = np.linspace(0, 2 * np.pi, 5, endpoint=False)
    joints = [np.zeros(3)]
    for a in ang:
        for r in (0.3, 0.55, 0.8, 1.0):
            joints.append(radius * r * np.array([np.cos(a), np.sin(a), 0.0]))
    rings = [np.zeros((1, 3))]
    for r in np.linspace(0.15, 0.95, 6):
        k = max(6, int(40 * r))
        a = np.linspace(0, 2 * np.pi, k, endpoint=False)
        rings.append(radius * r * np.stack([np.cos(a), np.sin(a), np.zeros(k)], axis=1))
    return np.array(joints), np.concatenate(rings)


def _disc_coverage(asset, pose, cam, center, radius):
    _, _, mo_full, _ = render_frame(asset, pose, cam)
    _, _, mo, _ = render_frame(asset, pose, cam, (center, radius, SKIN))
    total = mo_full.sum()
    return 1.0 - mo.sum() / total if total else 0.0


# ---------------------------------------------------------------------------

def synth_scene(spec: SynthSpec = SynthSpec()) -> SynthScene:
    rng = np.random.default_rng(spec.seed)
    asset = make_object(spec, rng)
    poses = make_trajectory(spec, rng)
    cam = Camera.from_focal(spec.focal, spec.width, spec.height)
    cams = [cam] * spec.n_frames

    hand_poses = hands = None
    discs = [None] * spec.n_frames
    if spec.occluder_coverage is not None:
        # disc in front of the object, drifting slowly across it
        start = rng.uniform(-0.25, 0.25, size=2) * np.asarray(spec.size[:2])
        drift = rng.normal(0, 0.01, size=2)
        centers = []
        for t, p in enumerate(poses):
            off = start + drift * t / max(1, spec.n_frames - 1)
            c = p.translation + np.array([off[0], off[1], -HAND_GAP - 0.5 * spec.size[2]])
            centers.append(c)
        lo, hi = 1e-3, 0.5
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            if _disc_coverage(asset, poses[0], cam, centers[0], mid) < spec.occluder_coverage:
                lo = mid
            else:
                hi = mid
        radius = 0.5 * (lo + hi)
        joints, verts = hand_geometry(radius)
        hand_poses, hands = [], []
        for t, c in enumerate(centers):
            hp = Pose(np.array([1.0, 0, 0, 0]), c)
            uv, _ = cam.project(hp.apply(joints))
            uv = uv + rng.normal(0, spec.joint_noise_px, size=uv.shape) if spec.joint_noise_px > 0 else uv
            det = np.concatenate([uv, np.ones((21, 1))], axis=1)
            hands.append(HandFrame(joints, det, verts, spec.contact))
            hand_poses.append(hp)
            discs[t] = (c, radius, SKIN)

    images, mos, mhs, pms, occl = [], [], [], [], []
    for t in range(spec.n_frames):
        rgb, depth, mo, mh = render_frame(asset, poses[t], cams[t], discs[t])
        if spec.depth_noise > 0:
            depth = depth + rng.normal(0, spec.depth_noise, size=depth.shape)
        images.append(rgb)
        mos.append(mo)
        mhs.append(mh)
        pms.append(Pointmap(depth_to_pointmap(depth, cams[t])))
        if discs[t] is not None:
            full = render_frame(asset, poses[t], cams[t])[2].sum()
            occl.append(1.0 - mo.sum() / full if full else 0.0)
        else:
            occl.append(0.0)
    return SynthScene(spec, asset, cams, poses, hand_poses, hands, images, mos, mhs, pms, occl)


def write_scene(scene: SynthScene, root, init_poses: Optional[List[Pose]] = None) -> Path:
    """Write every file of the sequence plus ground truth; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n = scene.spec.n_frames
    images, omasks, hmasks = [], [], []
    for t in range(n):
        io.write_image(root / "images" / f"{t:05d}.png", scene.images[t])
        io.write_mask(root / "masks_object" / f"{t:05d}.png", scene.obj_masks[t])
        io.write_mask(root / "masks_hand" / f"{t:05d}.png", scene.hand_masks[t])
        images.append(f"images/{t:05d}.png")
        omasks.append(f"masks_object/{t:05d}.png")
        hmasks.append(f"masks_hand/{t:05d}.png")
    io.write_pointmaps(root / "pointmaps" / "manifest.json", [pm.points.astype(np.float32) for pm in scene.pointmaps])
    io.write_cameras(root / "cameras.json", scene.cams)
    write_asset_ply(root / "object.ply", scene.asset)
    # quantised like the float32 asset so both files describe the same points exactly
    write_points_ply(root / "gt" / "object_points.ply", np.asarray(scene.asset.centers, dtype=np.float32).astype(np.float64))
    manifest = {
        "n_frames": n,
        "frames": list(range(n)),
        "fps": 30.0,
        "seed": int(scene.spec.seed),
        "images": images,
        "object_masks": omasks,
        "hand_masks": hmasks,
        "pointmaps": "pointmaps/manifest.json",
        "cameras": "cameras.json",
        "asset": "object.ply",
    }
    if scene.hands is not None:
        io.write_hands(root / "hand.json", scene.hands, scene.hand_poses, 1.0, None)
        manifest["hand"] = "hand.json"
    io.write_trajectory(root / "gt" / "trajectory.json", scene.obj_poses, scene.hand_poses,
                        [h.contact_flag for h in scene.hands] if scene.hands else None,
                        {"synth_spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(scene.spec).items()}})
    if init_poses is not None:
        io.write_trajectory(root / "init_trajectory.json", init_poses, scene.hand_poses)
        manifest["init_trajectory"] = "init_trajectory.json"
    features = _synthetic_features(scene)
    io.write_features(root / "features.json", features)
    manifest["features"] = "features.json"
    io.write_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def _synthetic_features(scene: SynthScene) -> np.ndarray:
    """Cheap stand-in descriptors: per-frame colour histograms of the masked object."""
    feats = []
    for img, m in zip(scene.images, scene.obj_masks):
        px = img[m] if m.any() else np.zeros((1, 3))
        hist = [np.histogram(px[:, c], bins=8, range=(0, 1))[0] for c in range(3)]
        f = np.concatenate(hist).astype(float) + 1e-3
        feats.append(f / np.linalg.norm(f))
    return np.array(feats)


def perturb_pose(pose: Pose, rng, max_rot_deg: float, max_trans: float) -> Pose:
    """Random rotation of at most ``max_rot_deg`` and translation of at most ``max_trans`` (meters)."""
    axis = rng.normal(size=3)
    q = quaternion_multiply(axis_angle_to_quaternion(axis, np.deg2rad(rng.uniform(0.5, 1.0) * max_rot_deg)), pose.rotation)
    d = rng.normal(size=3)
    d *= rng.uniform(0.5, 1.0) * max_trans / np.linalg.norm(d)
    return Pose(q / np.linalg.norm(q), pose.translation + d, pose.scale)
