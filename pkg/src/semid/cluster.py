"""Seeded K-means, plain and size-balanced.

The balanced variant keeps every cluster size inside
[floor(N/K), ceil(N/K)]. Its assignment step is greedy: all
(point, centroid) pairs are visited in ascending distance order and a
point is placed the first time it meets a centroid with remaining
capacity, where exactly N mod K clusters are allowed to reach the
ceiling. Greedy assignment carries no monotonicity guarantee of its
own, so an alternation is accepted only if it lowers the objective;
the reported objective history is therefore non-increasing by
construction and the loop stops at the first non-improvement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError
from .validation import as_matrix, check_positive_int

_TOL = 1e-12


@dataclass
class KMeansResult:
    assignments: np.ndarray  # (n,) int
    centroids: np.ndarray  # (k, d)
    objective: float
    history: list[float] = field(default_factory=list)


def _pairwise_sq(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |x|^2 - 2 x.c + |c|^2, clipped: roundoff can dip slightly below zero
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = points[idx]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _objective(points: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    diff = points - centroids[assignments]
    return float((diff * diff).sum())


def _means(points: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = centroids.copy()
    for j in range(centroids.shape[0]):
        mask = assignments == j
        if mask.any():
            out[j] = points[mask].mean(axis=0)
    return out


def _greedy_balanced_assign(d2: np.ndarray, k: int) -> np.ndarray:
    """Ascending-distance greedy assignment under floor/ceil capacities.

    Ties are broken by point index then centroid index (argsort of the
    flattened distance matrix is stable), so the result is a pure
    function of the distances.
    """
    n = d2.shape[0]
    floor, rem = divmod(n, k)
    order = np.argsort(d2, axis=None, kind="stable")
    assignments = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    big_used = 0
    placed = 0
    for flat in order:
        i, j = divmod(int(flat), k)
        if assignments[i] >= 0:
            continue
        if counts[j] < floor:
            pass
        elif counts[j] == floor and big_used < rem:
            big_used += 1
        else:
            continue
        assignments[i] = j
        counts[j] += 1
        placed += 1
        if placed == n:
            break
    return assignments


def _lloyd_assign(d2: np.ndarray) -> np.ndarray:
    return d2.argmin(axis=1)


def _run(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    assign_fn,
    max_iter: int,
) -> KMeansResult:
    centroids = _kmeanspp_init(points, k, rng)
    assignments = assign_fn(_pairwise_sq(points, centroids), k)
    centroids = _means(points, assignments, centroids)
    objective = _objective(points, assignments, centroids)
    history = [objective]
    for _ in range(max_iter - 1):
        new_assignments = assign_fn(_pairwise_sq(points, centroids), k)
        new_centroids = _means(points, new_assignments, centroids)
        new_objective = _objective(points, new_assignments, new_centroids)
        if new_objective >= objective - _TOL:
            break
        assignments, centroids, objective = new_assignments, new_centroids, new_objective
        history.append(objective)
    return KMeansResult(assignments, centroids, objective, history)


def _search(points, k, rng, assign_fn, max_iter, n_init) -> KMeansResult:
    points = as_matrix(points, "points")
    k = check_positive_int(k, "k")
    if k > points.shape[0]:
        raise ParameterError(f"k={k} exceeds the number of points {points.shape[0]}")
    check_positive_int(max_iter, "max_iter")
    check_positive_int(n_init, "n_init")
    best: KMeansResult | None = None
    for _ in range(n_init):
        result = _run(points, k, rng, assign_fn, max_iter)
        if best is None or result.objective < best.objective - _TOL:
            best = result
    return best


def kmeans(points, k, rng, max_iter: int = 50, n_init: int = 4) -> KMeansResult:
    """Plain Lloyd iteration with k-means++ seeding, best of ``n_init`` restarts."""

    def assign(d2, _k):
        return _lloyd_assign(d2)

    return _search(points, k, rng, assign, max_iter, n_init)


def constrained_kmeans(points, k, rng, max_iter: int = 50, n_init: int = 4) -> KMeansResult:
    """Balanced K-means: every cluster ends with floor(N/K) or ceil(N/K) points."""
    return _search(points, k, rng, _greedy_balanced_assign, max_iter, n_init)
