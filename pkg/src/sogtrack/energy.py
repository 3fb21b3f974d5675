"""SoG alignment energy between an image SoG and a projected object SoG.

E = sum_i min( sum_{j visible, top-k} E_ij , E_ii ),
E_ij = w_i w_j * exp(-|c_i - c_j|^2 / sigma_c^2) * overlap(B_i, B_j).

The functions here are the dense reference implementation. The optimizer
uses a sparse active-set version (``sogtrack.objective``) that is checked
against this one in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Gaussian2D


@dataclass(frozen=True)
class EnergyParams:
    sigma_c: float = 0.15
    top_k: int = 96

    def __post_init__(self):
        if not self.sigma_c > 0:
            raise ValueError("sigma_c must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def color_kernel(c1, c2, sigma_c: float = 0.15) -> float:
    d = np.asarray(c1, dtype=float) - np.asarray(c2, dtype=float)
    return float(np.exp(-np.dot(d, d) / sigma_c ** 2))


def gaussian_overlap(g1: Gaussian2D, g2: Gaussian2D) -> float:
    """Integral over the plane of the product of two unnormalised isotropic Gaussians."""
    s1, s2 = g1.sigma ** 2, g2.sigma ** 2
    d2 = float(np.sum((g1.mu - g2.mu) ** 2))
    return 2.0 * math.pi * s1 * s2 / (s1 + s2) * math.exp(-d2 / (s1 + s2))


def pair_energy(img_g: Gaussian2D, mdl_g: Gaussian2D, params: EnergyParams = EnergyParams()) -> float:
    return img_g.weight * mdl_g.weight * color_kernel(img_g.color, mdl_g.color, params.sigma_c) * gaussian_overlap(img_g, mdl_g)


def self_energy(g: Gaussian2D) -> float:
    return g.weight * g.weight * math.pi * g.sigma ** 2


def _as_arrays(gaussians):
    """Accept a list of Gaussian2D or an object with mu/sigma/color/weight arrays."""
    if hasattr(gaussians, "mu") and not isinstance(gaussians, Gaussian2D):
        return (np.asarray(gaussians.mu, float).reshape(-1, 2), np.asarray(gaussians.sigma, float).reshape(-1),
                np.asarray(gaussians.color, float).reshape(-1, 3), np.asarray(gaussians.weight, float).reshape(-1))
    g = list(gaussians)
    if not g:
        return np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0)
    return (np.array([x.mu for x in g]), np.array([x.sigma for x in g], float),
            np.array([x.color for x in g]), np.array([x.weight for x in g], float))


def pair_energy_matrix(img_mu, img_sigma, img_color, img_w, mdl_mu, mdl_sigma, mdl_color, mdl_w, sigma_c):
    s1 = img_sigma[:, None] ** 2
    s2 = mdl_sigma[None, :] ** 2
    ssum = s1 + s2
    d2 = ((img_mu[:, None, :] - mdl_mu[None, :, :]) ** 2).sum(-1)
    dc2 = ((img_color[:, None, :] - mdl_color[None, :, :]) ** 2).sum(-1)
    return (img_w[:, None] * mdl_w[None, :] * np.exp(-dc2 / sigma_c ** 2)
            * 2.0 * np.pi * s1 * s2 / ssum * np.exp(-d2 / ssum))


def visibility_gate(projected, hand_mask) -> np.ndarray:
    """True where the hand mask is empty at the rounded projected mean.

    Means that round outside the image, or are not finite, are reported as not visible.
    ``projected`` may be a list of Gaussian2D or an (M, 2) array of means.
    """
    hand_mask = np.asarray(hand_mask)
    if isinstance(projected, np.ndarray) and projected.ndim == 2 and projected.shape[1] == 2:
        mu = projected
    else:
        mu = _as_arrays(projected)[0]
    if len(mu) == 0:
        return np.zeros(0, dtype=bool)
    h, w = hand_mask.shape
    # round-half-away-from-zero, as in round(10.5) -> 11 for pixel indexing
    finite = np.all(np.isfinite(mu), axis=1)
    uv = np.floor(np.where(finite[:, None], mu, -1.0) + 0.5).astype(np.int64)
    inside = finite & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    flags = np.zeros(len(mu), dtype=bool)
    idx = np.flatnonzero(inside)
    flags[idx] = hand_mask[uv[idx, 1], uv[idx, 0]] == 0
    return flags


def alignment_energy(image_sog, projected, flags: Sequence[bool] | None = None,
                     params: EnergyParams = EnergyParams()) -> float:
    img = _as_arrays(image_sog)
    mdl = _as_arrays(projected)
    m = len(mdl[1])
    if flags is None:
        flags = np.ones(m, dtype=bool)
    flags = np.asarray(flags, dtype=bool)
    if len(flags) != m:
        raise ValueError(f"{len(flags)} visibility flags for {m} projected Gaussians")
    if len(img[1]) == 0 or not flags.any():
        return 0.0
    vis = np.flatnonzero(flags)
    E = pair_energy_matrix(*img, mdl[0][vis], mdl[1][vis], mdl[2][vis], mdl[3][vis], params.sigma_c)
    k = min(params.top_k, E.shape[1])
    # stable sort on -E keeps the lower model index first among ties
    order = np.argsort(-E, axis=1, kind="stable")[:, :k]
    contrib = np.take_along_axis(E, order, axis=1).sum(1)
    e_ii = img[3] ** 2 * np.pi * img[1] ** 2
    return float(np.minimum(contrib, e_ii).sum())
