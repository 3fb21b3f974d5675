import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sogtrack.energy import (
    EnergyParams,
    alignment_energy,
    color_kernel,
    gaussian_overlap,
    pair_energy,
    self_energy,
    visibility_gate,
)
from sogtrack.geometry import Gaussian2D
from sogtrack.image_sog import ImageSoG

PI_OVER_E = 1.1557273497909217  # pi * exp(-1), frozen from grid_overlap below


def grid_overlap(g1, g2, n=400):
    """Midpoint-rule integral of the product over a 400 x 400 grid spanning +-6 sigma around both means.

    Each blob is sqrt(2) exp(-|x - mu|^2 / sigma^2), the profile whose product integral is the closed form.
    """
    s = max(g1.sigma, g2.sigma)
    lo = np.minimum(g1.mu, g2.mu) - 6 * s
    hi = np.maximum(g1.mu, g2.mu) + 6 * s
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    X, Y = np.meshgrid(xs, ys)
    f1 = np.sqrt(2) * np.exp(-((X - g1.mu[0]) ** 2 + (Y - g1.mu[1]) ** 2) / g1.sigma ** 2)
    f2 = np.sqrt(2) * np.exp(-((X - g2.mu[0]) ** 2 + (Y - g2.mu[1]) ** 2) / g2.sigma ** 2)
    return float((f1 * f2).sum() * (hi[0] - lo[0]) * (hi[1] - lo[1]) / n ** 2)


def random_pair(rng):
    s1, s2 = rng.uniform(0.5, 5.0, 2)
    mu1 = rng.uniform(-20, 20, 2)
    d = rng.normal(size=2)
    d *= rng.uniform(0, 2.5) * np.sqrt(s1 ** 2 + s2 ** 2) / np.linalg.norm(d)
    return Gaussian2D(mu1, s1), Gaussian2D(mu1 + d, s2)


def test_overlap_examples():
    g = Gaussian2D([0, 0], 1.0)
    assert abs(gaussian_overlap(g, g) - math.pi) < 1e-9
    h = Gaussian2D([1, 1], 1.0)
    assert gaussian_overlap(g, h) == pytest.approx(PI_OVER_E, rel=1e-12)
    assert abs(grid_overlap(g, h) - PI_OVER_E) / PI_OVER_E < 1e-3
    assert gaussian_overlap(g, h) == gaussian_overlap(h, g)


def test_overlap_matches_grid_integration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g1, g2 = random_pair(rng)
        ref = grid_overlap(g1, g2)
        assert abs(gaussian_overlap(g1, g2) - ref) / ref < 1e-3


def test_color_kernel_examples():
    assert color_kernel([0.2, 0.3, 0.4], [0.2, 0.3, 0.4]) == 1.0
    assert color_kernel([0, 0, 0], [1, 1, 1], 0.15) < 1e-50
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=3), rng.uniform(size=3)
    assert color_kernel(a, b) == color_kernel(b, a)


def test_pair_energy_examples():
    g = Gaussian2D([3, 4], 2.0, color=[0.1, 0.5, 0.9])
    assert pair_energy(g, g) == pytest.approx(4 * math.pi)
    assert self_energy(g) == pytest.approx(4 * math.pi)
    opposite = Gaussian2D([3, 4], 2.0, color=[0.9, 0.5, 0.1])
    assert pair_energy(g, opposite) < 1e-10
    h = Gaussian2D([4, 2], 1.5, color=[0.2, 0.5, 0.8])
    assert pair_energy(g, h) <= gaussian_overlap(g, h)


def test_visibility_gate_examples():
    g = [Gaussian2D([10.4, 20.6], 1.0), Gaussian2D([3.0, 3.0], 1.0), Gaussian2D([-1.0, 3.0], 1.0)]
    zeros = np.zeros((32, 32), np.uint8)
    assert list(visibility_gate(g, zeros)) == [True, True, False]  # out-of-image means are gated
    assert not visibility_gate(g, np.ones((32, 32), np.uint8)).any()
    m = zeros.copy()
    m[21, 10] = 1
    assert list(visibility_gate(g, m)) == [False, True, False]
    m = zeros.copy()
    m[20, 10] = 1
    assert list(visibility_gate(g, m)) == [True, True, False]


def reference_energy(img, mdl, flags, params=EnergyParams()):
    """Explicit loops: gate, take top-k per image Gaussian (lower index on ties), clamp at self-energy."""
    total = 0.0
    for gi in img:
        vals = [(pair_energy(gi, gj, params), j) for j, (gj, f) in enumerate(zip(mdl, flags)) if f]
        vals.sort(key=lambda x: (-x[0], x[1]))
        total += min(sum(v for v, _ in vals[:params.top_k]), self_energy(gi))
    return total


def random_sogs(rng, n_img=12, n_mdl=20, spread=15.0):
    img = [Gaussian2D(rng.uniform(0, spread, 2), rng.uniform(0.5, 4), rng.uniform(size=3), 1.0) for _ in range(n_img)]
    mdl = [Gaussian2D(rng.uniform(0, spread, 2), rng.uniform(0.5, 4), rng.uniform(size=3), 1.0) for _ in range(n_mdl)]
    return img, mdl


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_alignment_energy_matches_reference(seed, k):
    rng = np.random.default_rng(seed)
    img, mdl = random_sogs(rng)
    if rng.uniform() < 0.3:  # exact ties between model Gaussians
        mdl = mdl[:10] + mdl[:10]
    flags = rng.uniform(size=len(mdl)) < 0.8
    p = EnergyParams(top_k=k)
    assert alignment_energy(img, mdl, flags, p) == pytest.approx(reference_energy(img, mdl, flags, p), rel=1e-12)


def test_alignment_energy_examples():
    rng = np.random.default_rng(2)
    img, mdl = random_sogs(rng)
    assert alignment_energy(img, []) == 0.0
    assert alignment_energy(img, mdl, [False] * len(mdl)) == 0.0
    expected = sum(math.pi * g.sigma ** 2 for g in img)
    assert alignment_energy(img, img) == pytest.approx(expected, rel=1e-12)
    sog = ImageSoG.from_gaussians(img)
    assert alignment_energy(sog, mdl) == alignment_energy(img, mdl)
    with pytest.raises(ValueError):
        alignment_energy(img, mdl, [True])


@given(st.integers(0, 2 ** 32 - 1))
def test_energy_properties(seed):
    rng = np.random.default_rng(seed)
    img, mdl = random_sogs(rng)
    flags = np.ones(len(mdl), bool)
    e_all = alignment_energy(img, mdl, flags)
    assert e_all <= sum(self_energy(g) for g in img) + 1e-12
    # turning visibility off never increases the energy
    for j in rng.permutation(len(mdl))[:5]:
        f2 = flags.copy()
        f2[j] = False
        e2 = alignment_energy(img, mdl, f2)
        assert e2 <= e_all + 1e-12
        flags, e_all = f2, e2
    # common translation leaves the energy unchanged
    off = rng.uniform(-50, 50, 2)
    img2 = [Gaussian2D(g.mu + off, g.sigma, g.color, g.weight) for g in img]
    mdl2 = [Gaussian2D(g.mu + off, g.sigma, g.color, g.weight) for g in mdl]
    assert abs(alignment_energy(img2, mdl2) - alignment_energy(img, mdl)) < 1e-9


def test_energy_params_validation():
    assert EnergyParams() == EnergyParams(0.15, 96)
    with pytest.raises(ValueError):
        EnergyParams(sigma_c=0.0)
    with pytest.raises(ValueError):
        EnergyParams(top_k=0)


def test_translation_gradient_points_toward_overlap():
    """Moving the model Gaussian toward the image Gaussian raises the energy, matching the analytic derivative."""
    img = [Gaussian2D([0.0, 0.0], 2.0)]
    x = 3.0
    s = 2 * 2.0 ** 2
    analytic = gaussian_overlap(img[0], Gaussian2D([x, 0], 2.0)) * (-2 * x / s)
    h = 1e-5
    fd = (alignment_energy(img, [Gaussian2D([x + h, 0], 2.0)]) - alignment_energy(img, [Gaussian2D([x - h, 0], 2.0)])) / (2 * h)
    assert analytic < 0 and fd == pytest.approx(analytic, rel=1e-6)
