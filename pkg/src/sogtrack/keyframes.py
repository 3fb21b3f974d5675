"""Balanced-and-diverse keyframe selection from per-frame descriptors."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

BRUTE_FORCE_BUDGET = 1_000_000


@dataclass(frozen=True)
class KeyframeScores:
    mean_similarity: np.ndarray
    magnitude: np.ndarray
    variance: np.ndarray

    @property
    def balance(self) -> np.ndarray:
        """Per-frame |s - 1/2| + |n - 1/2| + |v - 1/2|."""
        return (np.abs(self.mean_similarity - 0.5) + np.abs(self.magnitude - 0.5)
                + np.abs(self.variance - 0.5))


def minmax(x) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant vector maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _check(features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 1:
        raise ValueError("features must be an N x d matrix with N >= 1")
    if not np.all(np.isfinite(f)):
        raise ValueError("features contain NaN or infinite entries")
    return f


def compute_scores(features):
    """Similarity matrix of the re-normalized rows and the three normalized frame scores."""
    f = _check(features)
    n = len(f)
    norms = np.linalg.norm(f, axis=1)
    unit = f / np.where(norms > 0, norms, 1.0)[:, None]
    S = unit @ unit.T
    if n < 2:
        z = np.zeros(n)
        return S, KeyframeScores(z, z.copy(), z.copy())
    mean_sim = (S.sum(1) - np.diag(S)) / (n - 1)
    return S, KeyframeScores(minmax(mean_sim), minmax(norms), minmax(f.var(axis=1)))


def selection_objective(S, balance, subset, lambda_div: float) -> float:
    """Balance of the chosen frames plus lambda * sum of each one's max similarity to the others."""
    idx = np.asarray(sorted(subset), dtype=int)
    val = float(balance[idx].sum())
    if len(idx) >= 2:
        sub = S[np.ix_(idx, idx)].copy()
        np.fill_diagonal(sub, -np.inf)
        val += lambda_div * float(sub.max(axis=1).sum())
    return val


def greedy_select(features, K: int, lambda_div: float = 1.0) -> list:
    """Seed with the most balanced frame, then add the frame with the smallest objective increase.

    The increase counts the new frame's own diversity term and the change in
    the terms of frames already selected. Ties go to the lowest index.
    """
    S, scores = compute_scores(features)
    n = len(S)
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    bal = scores.balance
    chosen = [int(np.argmin(bal))]
    current = selection_objective(S, bal, chosen, lambda_div)
    while len(chosen) < K:
        best, best_val = None, np.inf
        for c in range(n):
            if c in chosen:
                continue
            val = selection_objective(S, bal, chosen + [c], lambda_div) - current
            if val < best_val - 1e-12:
                best, best_val = c, val
        chosen.append(best)
        current += best_val
    return sorted(chosen)


def brute_force_select(features, K: int, lambda_div: float = 1.0, budget: int = BRUTE_FORCE_BUDGET) -> list:
    """Exact argmin over all K-subsets; ties go to the lexicographically smallest set."""
    S, scores = compute_scores(features)
    n = len(S)
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    if comb(n, K) > budget:
        raise ValueError(f"combinatorial budget exceeded: C({n},{K}) > {budget}")
    bal = scores.balance
    best, best_val = None, np.inf
    for sub in combinations(range(n), K):
        val = selection_objective(S, bal, sub, lambda_div)
        if val < best_val - 1e-12:
            best, best_val = list(sub), val
    return best


def random_select(n_frames: int, K: int, seed: int = 0) -> list:
    """K distinct frames drawn uniformly (the no-selection ablation)."""
    if not 1 <= K <= n_frames:
        raise ValueError(f"K must lie in [1, {n_frames}], got {K}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_frames, size=K, replace=False))


def objective_of(features, subset, lambda_div: float = 1.0) -> float:
    S, scores = compute_scores(features)
    return selection_objective(S, scores.balance, subset, lambda_div)
