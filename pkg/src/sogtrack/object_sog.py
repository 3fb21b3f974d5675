"""Dense Gaussian-splat assets, their sparsified isotropic SoG, and projection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from plyfile import PlyData, PlyElement

from .geometry import Camera, Gaussian2D, Gaussian3D, GeometryError, Pose

SH_C0 = 0.28209479177387814
MIN_OPACITY = 0.05

PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"f_dc_{i}" for i in range(3)]
)


class AssetFormatError(ValueError):
    pass


def dc_to_rgb(dc) -> np.ndarray:
    return np.clip(0.5 + SH_C0 * np.asarray(dc, dtype=float), 0.0, 1.0)


def rgb_to_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


@dataclass
class DenseGaussianAsset:
    """Splat asset holding the raw stored fields.

    ``log_scales`` and ``opacity_logits`` are kept exactly as stored so that a
    write/read cycle is lossless; the activated values are properties.
    """

    centers: np.ndarray         # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    colors_dc: np.ndarray       # (N, 3)

    def __post_init__(self):
        n = len(self.centers)
        if n < 1:
            raise AssetFormatError("asset has no Gaussians")
        for name, shape in (("log_scales", (n, 3)), ("rotations", (n, 4)), ("opacity_logits", (n,)), ("colors_dc", (n, 3))):
            if np.shape(getattr(self, name)) != shape:
                raise AssetFormatError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    def __len__(self):
        return len(self.centers)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scales, dtype=np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-np.asarray(self.opacity_logits, dtype=np.float64)))

    @property
    def colors(self) -> np.ndarray:
        return dc_to_rgb(self.colors_dc)

    @classmethod
    def from_activated(cls, centers, scales, rotations=None, opacities=None, colors=None) -> "DenseGaussianAsset":
        centers = np.asarray(centers, dtype=float)
        n = len(centers)
        scales = np.broadcast_to(np.asarray(scales, dtype=float).reshape(-1, 1) if np.ndim(scales) == 1 else scales, (n, 3))
        rotations = np.tile([1.0, 0, 0, 0], (n, 1)) if rotations is None else np.asarray(rotations, dtype=float)
        opacities = np.full(n, 0.99) if opacities is None else np.asarray(opacities, dtype=float)
        colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=float)
        return cls(centers, np.log(scales), rotations, np.log(opacities / (1 - opacities)), rgb_to_dc(colors))


def read_asset_ply(path) -> DenseGaussianAsset:
    ply = PlyData.read(str(path))
    if "vertex" not in ply:
        raise AssetFormatError(f"{path}: no vertex element")
    v = ply["vertex"]
    names = {p.name for p in v.properties}
    for prop in PLY_PROPERTIES:
        if prop not in names:
            raise AssetFormatError(f"{path}: missing required property '{prop}'")

    def cols(*keys):
        return np.stack([np.asarray(v[k]) for k in keys], axis=1)

    return DenseGaussianAsset(
        centers=cols("x", "y", "z"),
        log_scales=cols("scale_0", "scale_1", "scale_2"),
        rotations=cols("rot_0", "rot_1", "rot_2", "rot_3"),
        opacity_logits=np.asarray(v["opacity"]),
        colors_dc=cols("f_dc_0", "f_dc_1", "f_dc_2"),
    )


def write_asset_ply(path, asset: DenseGaussianAsset) -> None:
    n = len(asset)
    arr = np.empty(n, dtype=[(p, "<f4") for p in PLY_PROPERTIES])
    for i, k in enumerate("xyz"):
        arr[k] = asset.centers[:, i]
    for i in range(3):
        arr[f"scale_{i}"] = asset.log_scales[:, i]
        arr[f"f_dc_{i}"] = asset.colors_dc[:, i]
    for i in range(4):
        arr[f"rot_{i}"] = asset.rotations[:, i]
    arr["opacity"] = asset.opacity_logits
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))


def read_points_ply(path) -> np.ndarray:
    """Vertex positions of any PLY (mesh or splat) as an (M, 3) float64 array."""
    v = PlyData.read(str(path))["vertex"]
    return np.stack([np.asarray(v[k], dtype=np.float64) for k in "xyz"], axis=1)


def write_points_ply(path, points) -> None:
    pts = np.asarray(points)
    arr = np.empty(len(pts), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    arr["x"], arr["y"], arr["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))


# ---------------------------------------------------------------------------

def farthest_point_sample(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset, starting at ``seed_index``; ties go to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k > n:
        raise ValueError("sample larger than population")
    if k < 1:
        raise ValueError("k must be >= 1")
    out = np.empty(k, dtype=int)
    out[0] = seed_index
    d = ((pts - pts[seed_index]) ** 2).sum(1)
    d[seed_index] = -1.0
    for i in range(1, k):
        j = int(np.argmax(d))
        out[i] = j
        d = np.minimum(d, ((pts - pts[j]) ** 2).sum(1))
        d[out[: i + 1]] = -1.0
    return out


@dataclass
class ObjectSoG:
    mu: np.ndarray      # (M, 3) canonical frame
    sigma: np.ndarray   # (M,)
    color: np.ndarray   # (M, 3)
    weight: np.ndarray  # (M,)

    def __len__(self):
        return len(self.sigma)

    @property
    def count(self) -> int:
        return len(self.sigma)

    @property
    def gaussians(self) -> List[Gaussian3D]:
        return [Gaussian3D(m, s, c, w) for m, s, c, w in zip(self.mu, self.sigma, self.color, self.weight)]

    @classmethod
    def from_gaussians(cls, gaussians) -> "ObjectSoG":
        g = list(gaussians)
        return cls(np.array([x.mu for x in g]), np.array([x.sigma for x in g], dtype=float),
                   np.array([x.color for x in g]), np.array([x.weight for x in g], dtype=float))

    def diameter(self) -> float:
        from scipy.spatial import ConvexHull
        from scipy.spatial.distance import pdist

        pts = self.mu
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:
            pass
        return float(pdist(pts).max()) if len(pts) > 1 else 0.0


def to_object_sog(asset: DenseGaussianAsset, k: int = 2000, sigma_factor: float = 3.0,
                  min_opacity: float = MIN_OPACITY) -> ObjectSoG:
    if k > len(asset):
        raise ValueError("sample larger than population")
    keep = np.flatnonzero(asset.opacities >= min_opacity)
    if len(keep) == 0:
        raise ValueError("no Gaussian passes the opacity filter")
    centers = np.asarray(asset.centers, dtype=np.float64)[keep]
    seed = int(np.argmin(((centers - centers.mean(0)) ** 2).sum(1)))
    idx = keep[farthest_point_sample(centers, min(k, len(keep)), seed)]
    scales = asset.scales[idx]
    return ObjectSoG(
        mu=np.asarray(asset.centers, dtype=np.float64)[idx],
        sigma=sigma_factor * scales.mean(axis=1),
        color=asset.colors[idx],
        weight=np.ones(len(idx)),
    )


def project_sog_arrays(sog: ObjectSoG, pose: Pose, cam: Camera):
    """Vectorized projection. Returns (kept indices, mu2d, sigma2d, depth)."""
    world = pose.apply(sog.mu)
    uv, z = cam.project(world)
    keep = np.flatnonzero(z > 1e-9)
    sig = cam.f_avg * pose.scale * sog.sigma[keep] / z[keep]
    return keep, uv[keep], sig, z[keep]


def project_sog(sog: ObjectSoG, pose: Pose, cam: Camera) -> List[Gaussian2D]:
    keep, uv, sig, z = project_sog_arrays(sog, pose, cam)
    if len(keep) == 0:
        raise GeometryError("object fully behind camera")
    return [Gaussian2D(uv[i], sig[i], sog.color[j], sog.weight[j], float(z[i])) for i, j in enumerate(keep)]
