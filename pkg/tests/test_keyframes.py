from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sogtrack.keyframes import (
    brute_force_select,
    compute_scores,
    greedy_select,
    minmax,
    objective_of,
    random_select,
)


def reference_objective(features, subset, lam):
    """Plain-loop evaluation of the balance-and-diversity objective."""
    f = np.asarray(features, float)
    n = len(f)
    unit = [row / np.linalg.norm(row) for row in f]
    S = [[float(np.dot(unit[i], unit[j])) for j in range(n)] for i in range(n)]

    def norm01(x):
        lo, hi = min(x), max(x)
        return [0.0 if hi == lo else (v - lo) / (hi - lo) for v in x]

    sbar = norm01([sum(S[t][j] for j in range(n) if j != t) / (n - 1) for t in range(n)])
    mag = norm01([float(np.linalg.norm(row)) for row in f])
    var = norm01([float(np.var(row)) for row in f])
    total = sum(abs(sbar[t] - 0.5) + abs(mag[t] - 0.5) + abs(var[t] - 0.5) for t in subset)
    if len(subset) >= 2:
        total += lam * sum(max(S[t][u] for u in subset if u != t) for t in subset)
    return total


def duplicate_pair_instance(rng, n=6, d=8):
    """Mutually orthogonal descriptors of random magnitude, one of them repeated.

    All cross-similarities vanish except within the duplicate pair, so the
    greedy increments are independent of each other and greedy is exact.
    """
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    f = Q[:n] * rng.uniform(0.5, 2.0, size=(n, 1))
    i, j = rng.choice(n, size=2, replace=False)
    f[j] = f[i]
    return f


def test_scores_examples():
    S, sc = compute_scores(np.array([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(S, [[1, 1], [1, 1]])
    S, _ = compute_scores(np.eye(2))
    assert S[0, 1] == 0.0
    rng = np.random.default_rng(0)
    _, sc = compute_scores(rng.normal(size=(10, 5)))
    for v in (sc.mean_similarity, sc.magnitude, sc.variance):
        assert v.min() >= 0 and v.max() <= 1


def test_minmax_constant_maps_to_zero():
    np.testing.assert_array_equal(minmax([3.0, 3.0, 3.0]), [0, 0, 0])


def test_nan_features_rejected():
    with pytest.raises(ValueError):
        compute_scores(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_objective_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(30):
        f = rng.normal(size=(7, 4))
        sub = sorted(rng.choice(7, size=3, replace=False).tolist())
        assert objective_of(f, sub, 0.7) == pytest.approx(reference_objective(f, sub, 0.7), rel=1e-12)


def test_greedy_examples():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(6, 4))
    assert greedy_select(f, 6) == list(range(6))
    _, sc = compute_scores(f)
    assert greedy_select(f, 1) == [int(np.argmin(sc.balance))]
    with pytest.raises(ValueError):
        greedy_select(f, 7)
    with pytest.raises(ValueError):
        brute_force_select(f, 7)


def test_duplicate_pair_greedy_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = duplicate_pair_instance(rng)
        greedy = greedy_select(f, 3, 1.0)
        oracle = min(reference_objective(f, list(s), 1.0) for s in combinations(range(6), 3))
        assert reference_objective(f, greedy, 1.0) == pytest.approx(oracle, abs=1e-12)
        assert objective_of(f, brute_force_select(f, 3, 1.0), 1.0) == pytest.approx(oracle, abs=1e-12)


def test_greedy_never_beats_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(30):
        f = rng.normal(size=(rng.integers(3, 9), 5))
        k = int(rng.integers(1, len(f) + 1))
        lam = float(rng.uniform(0, 2))
        assert objective_of(f, greedy_select(f, k, lam), lam) >= objective_of(f, brute_force_select(f, k, lam), lam) - 1e-12


def test_brute_force_examples():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(6, 3))
    assert brute_force_select(f, 6) == list(range(6))
    _, sc = compute_scores(f)
    assert brute_force_select(f, 3, 0.0) == sorted(np.argsort(sc.balance, kind="stable")[:3].tolist())
    with pytest.raises(ValueError, match="budget"):
        brute_force_select(rng.normal(size=(40, 3)), 20)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_selection_invariant_to_uniform_scaling(seed, c):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(8, 6))
    assert greedy_select(f * c, 3) == greedy_select(f, 3)
    assert brute_force_select(f * c, 3) == brute_force_select(f, 3)


def test_random_select_is_seeded():
    assert random_select(20, 5, seed=3) == random_select(20, 5, seed=3)
    assert len(set(random_select(20, 5, seed=4))) == 5
    with pytest.raises(ValueError):
        random_select(3, 4)
