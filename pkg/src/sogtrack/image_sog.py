"""Quad-tree colour clustering of a masked frame into a 2D sum of Gaussians."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .geometry import Gaussian2D


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class QuadTreeParams:
    max_depth: int = 8
    color_variance_threshold: float = 0.01
    min_cell_size: int = 2
    bbox_padding: int = 2
    min_valid_mask_ratio: float = 1e-6

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_cell_size < 1:
            raise ValueError("min_cell_size must be >= 1")
        if self.color_variance_threshold < 0 or self.min_valid_mask_ratio < 0 or self.bbox_padding < 0:
            raise ValueError("thresholds must be non-negative")


@dataclass
class ImageSoG:
    """Image Gaussians stored column-wise; ``gaussians`` gives the object view."""

    mu: np.ndarray                      # (N, 2) pixel (u, v)
    sigma: np.ndarray                   # (N,)
    color: np.ndarray                   # (N, 3)
    weight: np.ndarray                  # (N,)
    source_frame: int = 0
    mask_area: int = 0
    cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=int))  # (r0, c0, r1, c1)

    def __len__(self):
        return len(self.sigma)

    @property
    def gaussians(self) -> List[Gaussian2D]:
        return [Gaussian2D(m, s, c, w) for m, s, c, w in zip(self.mu, self.sigma, self.color, self.weight)]

    @classmethod
    def from_gaussians(cls, gaussians, source_frame: int = 0, mask_area: int = 0) -> "ImageSoG":
        gaussians = list(gaussians)
        if not gaussians:
            return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0), source_frame, mask_area)
        return cls(
            np.array([g.mu for g in gaussians]),
            np.array([g.sigma for g in gaussians], dtype=float),
            np.array([g.color for g in gaussians]),
            np.array([g.weight for g in gaussians], dtype=float),
            source_frame,
            mask_area,
        )

    def subset(self, idx) -> "ImageSoG":
        idx = np.asarray(idx, dtype=int)
        return ImageSoG(self.mu[idx], self.sigma[idx], self.color[idx], self.weight[idx],
                        self.source_frame, self.mask_area,
                        self.cells[idx] if len(self.cells) else self.cells)


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1) + a.shape[2:], dtype=np.float64)
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def _box(sat, r0, c0, r1, c1):
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def _split(lo: int, hi: int):
    n = hi - lo
    if n <= 1:
        return [(lo, hi)]
    mid = lo + (n + 1) // 2  # low-index child gets the larger half
    return [(lo, mid), (mid, hi)]


def mask_bbox(mask: np.ndarray, padding: int = 0):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise EmptyMaskError("empty object mask")
    h, w = mask.shape
    r0 = max(0, rows[0] - padding)
    c0 = max(0, cols[0] - padding)
    r1 = min(h, rows[-1] + 1 + padding)
    c1 = min(w, cols[-1] + 1 + padding)
    return int(r0), int(c0), int(r1), int(c1)


def build_image_sog(image, mask, params: QuadTreeParams = QuadTreeParams(), source_frame: int = 0) -> ImageSoG:
    """Subdivide the padded mask bounding box until cells are colour-homogeneous.

    A cell stops splitting when the mean of its per-channel population
    variances over valid pixels is at most the threshold, when its longer
    side is at most ``min_cell_size``, or at ``max_depth``. Each kept leaf
    becomes one Gaussian at its valid-pixel centroid with the mean valid
    colour and sigma equal to half the cell side. Colours stay in RGB.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    if not mask.any():
        raise EmptyMaskError("empty object mask")

    r0, c0, r1, c1 = mask_bbox(mask, params.bbox_padding)
    m = mask[r0:r1, c0:c1].astype(np.float64)
    img = image[r0:r1, c0:c1, :3]
    rr, cc = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    sat_n = _integral(m)
    sat_c = _integral(img * m[..., None])
    sat_c2 = _integral(img * img * m[..., None])
    sat_r = _integral(rr * m)
    sat_cc = _integral(cc * m)

    mus, sigmas, colors, cells = [], [], [], []
    stack = [(0, 0, r1 - r0, c1 - c0, 0)]
    while stack:
        a0, b0, a1, b1, depth = stack.pop()
        n = _box(sat_n, a0, b0, a1, b1)
        if n <= 0:
            continue
        area = (a1 - a0) * (b1 - b0)
        mean = _box(sat_c, a0, b0, a1, b1) / n
        var = np.maximum(_box(sat_c2, a0, b0, a1, b1) / n - mean * mean, 0.0).mean()
        side = max(a1 - a0, b1 - b0)
        if var <= params.color_variance_threshold or side <= params.min_cell_size or depth >= params.max_depth:
            if n / area < params.min_valid_mask_ratio:
                continue
            cy = _box(sat_r, a0, b0, a1, b1) / n
            cx = _box(sat_cc, a0, b0, a1, b1) / n
            mus.append((cx, cy))
            sigmas.append(0.25 * ((a1 - a0) + (b1 - b0)))
            colors.append(np.clip(mean, 0.0, 1.0))
            cells.append((a0 + r0, b0 + c0, a1 + r0, b1 + c0))
            continue
        children = [(ra, rb, ca, cb) for ra, rb in _split(a0, a1) for ca, cb in _split(b0, b1)]
        # pushed in reverse so leaves come out in raster quadrant order
        for ra, rb, ca, cb in reversed(children):
            stack.append((ra, ca, rb, cb, depth + 1))

    k = len(sigmas)
    return ImageSoG(
        mu=np.array(mus, dtype=float).reshape(k, 2),
        sigma=np.array(sigmas, dtype=float),
        color=np.array(colors, dtype=float).reshape(k, 3),
        weight=np.ones(k),
        source_frame=source_frame,
        mask_area=int(mask.sum()),
        cells=np.array(cells, dtype=int).reshape(k, 4),
    )


def coverage_fraction(sog: ImageSoG, mask, k_sigma: float = 2.0) -> float:
    """Fraction of mask pixels within ``k_sigma * sigma`` of some Gaussian centre."""
    mask = np.asarray(mask) != 0
    total = int(mask.sum())
    if total == 0 or len(sog) == 0:
        return 0.0
    rows, cols = np.nonzero(mask)
    pix = np.stack([cols, rows], axis=1).astype(float)
    covered = np.zeros(len(pix), dtype=bool)
    for mu, s in zip(sog.mu, sog.sigma):
        r = k_sigma * s
        covered |= ((pix - mu) ** 2).sum(1) <= r * r
    return float(covered.sum()) / total
