"""Small scene builders shared by the tests."""

import numpy as np

from sogtrack.geometry import Camera, Pose, axis_angle_to_quaternion
from sogtrack.image_sog import build_image_sog
from sogtrack.object_sog import to_object_sog
from sogtrack.objective import FrameData, ParamBlocks
from sogtrack.priors import pointmap_depth_median


def random_pose(rng, max_t=1.0, scale=None) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    s = float(np.exp(rng.uniform(-0.5, 0.5))) if scale is None else scale
    return Pose(q, rng.uniform(-max_t, max_t, size=3), s)


def rotation_z(deg: float):
    return axis_angle_to_quaternion([0, 0, 1], np.deg2rad(deg))


def random_blob_mask(rng, h=64, w=64, min_pixels=100):
    """Union of a few random ellipses with at least ``min_pixels`` pixels."""
    vv, uu = np.mgrid[0:h, 0:w]
    while True:
        m = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cu, cv = rng.uniform(0, w), rng.uniform(0, h)
            a, b = rng.uniform(3, w / 3), rng.uniform(3, h / 3)
            th = rng.uniform(0, np.pi)
            x = (uu - cu) * np.cos(th) + (vv - cv) * np.sin(th)
            y = -(uu - cu) * np.sin(th) + (vv - cv) * np.cos(th)
            m |= (x / a) ** 2 + (y / b) ** 2 <= 1
        if m.sum() >= min_pixels:
            return m


def random_texture(rng, h=64, w=64, n_regions=6, noise=0.02):
    """Voronoi colour regions plus mild noise, clipped to [0, 1]."""
    seeds = rng.uniform(0, [w, h], size=(n_regions, 2))
    colors = rng.uniform(0, 1, size=(n_regions, 3))
    vv, uu = np.mgrid[0:h, 0:w]
    d = (uu[..., None] - seeds[:, 0]) ** 2 + (vv[..., None] - seeds[:, 1]) ** 2
    img = colors[np.argmin(d, axis=-1)]
    return np.clip(img + rng.normal(0, noise, size=img.shape), 0, 1)


def frames_from_scene(scene, object_count=None, with_hands=True):
    frames = []
    for t in range(scene.spec.n_frames):
        hand = scene.hands[t] if (with_hands and scene.hands is not None) else None
        isog = build_image_sog(scene.images[t], scene.obj_masks[t], source_frame=t)
        d_o = pointmap_depth_median(scene.pointmaps[t], scene.obj_masks[t], scene.cams[t])
        d_h = (pointmap_depth_median(scene.pointmaps[t], scene.hand_masks[t], scene.cams[t])
               if hand is not None else None)
        frames.append(FrameData(t, scene.cams[t], isog, scene.obj_masks[t], scene.hand_masks[t], hand, d_o, d_h))
    return frames


def object_sog_of(scene, count=2000):
    return to_object_sog(scene.asset, min(count, len(scene.asset)))


def params_of(obj_poses, hand_poses=None):
    n = len(obj_poses)
    if hand_poses is None:
        hq, ht, hs = np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros((n, 3)), 0.0
    else:
        hq = [p.rotation for p in hand_poses]
        ht = [p.translation for p in hand_poses]
        hs = float(np.log(hand_poses[0].scale))
    return ParamBlocks([p.rotation for p in obj_poses], [p.translation for p in obj_poses],
                       float(np.log(obj_poses[0].scale)), hq, ht, hs)


def simple_camera(f=100.0, w=100, h=100):
    return Camera.from_focal(f, w, h, cx=50.0, cy=50.0)
