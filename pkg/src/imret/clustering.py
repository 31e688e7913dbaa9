"""k-means, k-medoids and affinity propagation.

k-means works on raw vectors with squared Euclidean distance; k-medoids and
affinity propagation work on arbitrary pairwise distance/similarity tables,
which lets whole images be clustered through a set kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .parallel import parallel_map

__all__ = [
    "ClusteringResult",
    "ApConfig",
    "supervector",
    "kmeans",
    "kmedoids",
    "affinity_propagation",
    "kernel_similarity_matrix",
    "kernel_distance_matrix",
]

DistanceOracle = Union[np.ndarray, Callable[[int, int], float]]


@dataclass(frozen=True)
class ClusteringResult:
    """Outcome of a clustering run.

    ``representatives`` holds centroid vectors for k-means (array of shape
    (k, d)) or member item indices for k-medoids / affinity propagation.
    Every assignment indexes into ``representatives``.
    """

    assignments: tuple[int, ...]
    representatives: object
    objective: float
    iterations: int
    converged: bool

    @property
    def cluster_count(self) -> int:
        return len(self.representatives)

    def members(self, cluster: int) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.assignments) if a == cluster)


@dataclass(frozen=True)
class ApConfig:
    """Affinity propagation knobs.

    ``preference`` is applied to the similarity-matrix diagonal by
    :func:`kernel_similarity_matrix`; ``"median"`` means the median of the
    off-diagonal similarities. Damping is required in practice: the undamped
    updates oscillate on symmetric data.
    """

    damping: float = 0.5
    max_iterations: int = 500
    convergence_window: int = 25
    preference: float | str = "median"

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ValueError(f"damping must be in [0, 1), got {self.damping}")
        if self.max_iterations < 1 or self.convergence_window < 1:
            raise ValueError("iteration counts must be positive")
        if isinstance(self.preference, str) and self.preference != "median":
            raise ValueError(f"preference must be a real or 'median', got {self.preference!r}")


def supervector(feature_set) -> np.ndarray:
    """Concatenate a set's vectors, in stored order, into one (d*n,) vector."""
    return np.asarray(feature_set.array, dtype=np.float64).reshape(-1).copy()


def _as_matrix(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) array, got shape {arr.shape}")
    return arr


def _sq_distances_to(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances."""
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans(vectors, k: int, seed: int = 0, max_iterations: int = 100) -> ClusteringResult:
    """Lloyd's algorithm; objective is the total squared Euclidean distance.

    Initial centroids are k distinct data rows drawn uniformly from a seeded
    generator. An emptied cluster is reseeded from the point farthest from
    its current centroid. The objective is non-increasing per iteration.
    """
    points = _as_matrix(vectors)
    n = points.shape[0]
    unique_rows = np.unique(points, axis=0)
    if k < 1 or k > unique_rows.shape[0]:
        raise ValueError(f"k={k} but only {unique_rows.shape[0]} distinct vectors")
    rng = np.random.default_rng(seed)
    centers = unique_rows[rng.choice(unique_rows.shape[0], size=k, replace=False)].copy()

    assignments = np.full(n, -1, dtype=np.int64)
    objective = math.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        dists = _sq_distances_to(points, centers)
        new_assignments = np.argmin(dists, axis=1)
        new_objective = float(dists[np.arange(n), new_assignments].sum())
        if new_objective > objective + 1e-9 * max(1.0, abs(objective)):
            raise RuntimeError("k-means objective increased; internal invariant broken")
        objective = new_objective
        if np.array_equal(new_assignments, assignments):
            converged = True
            break
        assignments = new_assignments
        empty = [c for c in range(k) if not (assignments == c).any()]
        for c in range(k):
            if c not in empty:
                centers[c] = points[assignments == c].mean(axis=0)
        if empty:
            # Reseed each empty cluster from a distinct farthest point.
            own = dists[np.arange(n), assignments]
            farthest = np.argsort(-own, kind="stable")
            for c, idx in zip(empty, farthest):
                centers[c] = points[int(idx)]
    # Final snapshot so assignments/objective match the returned centers.
    dists = _sq_distances_to(points, centers)
    assignments = np.argmin(dists, axis=1)
    objective = float(dists[np.arange(n), assignments].sum())
    return ClusteringResult(
        assignments=tuple(int(a) for a in assignments),
        representatives=centers,
        objective=objective,
        iterations=iterations,
        converged=converged,
    )


def _distance_matrix(item_count: int, distance: DistanceOracle) -> np.ndarray:
    if callable(distance):
        mat = np.zeros((item_count, item_count), dtype=np.float64)
        for i in range(item_count):
            for j in range(i + 1, item_count):
                mat[i, j] = float(distance(i, j))
    else:
        mat = np.asarray(distance, dtype=np.float64)
        if mat.shape != (item_count, item_count):
            raise ValueError(f"distance matrix shape {mat.shape} != ({item_count}, {item_count})")
        if np.abs(np.diag(mat)).max(initial=0.0) > 1e-9:
            raise ValueError("distance oracle must have a zero diagonal")
        if not np.allclose(mat, mat.T, rtol=1e-9, atol=1e-12):
            raise ValueError("distance oracle must be symmetric")
        mat = np.triu(mat, k=1)
    # Mirror the upper triangle so the table is exactly symmetric.
    mat = mat + mat.T
    return mat


def kmedoids(
    item_count: int,
    distance: DistanceOracle,
    k: int,
    seed: int = 0,
    max_iterations: int = 100,
) -> ClusteringResult:
    """Alternating assign/update k-medoids over a pairwise distance oracle.

    ``distance`` is either a symmetric zero-diagonal matrix or a callable
    ``(i, j) -> float`` evaluated once per unordered pair. Medoids are items
    minimizing the summed within-cluster distance; all ties resolve to the
    lowest index and total cost is non-increasing per iteration.
    """
    if k < 1 or k > item_count:
        raise ValueError(f"k={k} invalid for {item_count} items")
    dmat = _distance_matrix(item_count, distance)
    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(item_count, size=k, replace=False))

    cost = math.inf
    converged = False
    iterations = 0
    assignments = np.zeros(item_count, dtype=np.int64)
    for iterations in range(1, max_iterations + 1):
        assignments = np.argmin(dmat[:, medoids], axis=1)
        new_cost = float(dmat[np.arange(item_count), medoids[assignments]].sum())
        if new_cost > cost + 1e-9 * max(1.0, abs(cost)):
            raise RuntimeError("k-medoids cost increased; internal invariant broken")
        cost = new_cost
        new_medoids = medoids.copy()
        for c in range(k):
            members = np.flatnonzero(assignments == c)
            if members.size == 0:
                continue  # duplicate-point degeneracy; medoid kept as-is
            within = dmat[np.ix_(members, members)].sum(axis=1)
            new_medoids[c] = members[int(np.argmin(within))]
        new_medoids = np.sort(new_medoids)
        if np.array_equal(new_medoids, medoids):
            converged = True
            break
        medoids = new_medoids
    assignments = np.argmin(dmat[:, medoids], axis=1)
    cost = float(dmat[np.arange(item_count), medoids[assignments]].sum())
    return ClusteringResult(
        assignments=tuple(int(a) for a in assignments),
        representatives=tuple(int(m) for m in medoids),
        objective=cost,
        iterations=iterations,
        converged=converged,
    )


def affinity_propagation(similarity: np.ndarray, config: ApConfig = ApConfig()) -> ClusteringResult:
    """Damped responsibility/availability message passing.

    The diagonal of ``similarity`` holds the preferences. Items whose
    self-availability plus self-responsibility is positive become exemplars;
    everything else is assigned to its most similar exemplar. At least one
    exemplar is always produced (falling back to the best a+r diagonal).
    """
    sim = np.array(similarity, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got shape {sim.shape}")
    n = sim.shape[0]
    if n == 1:
        return ClusteringResult((0,), (0,), float(sim[0, 0]), 0, True)

    lam = config.damping
    avail = np.zeros((n, n))
    resp = np.zeros((n, n))
    rows = np.arange(n)

    stable_for = 0
    previous: tuple[int, ...] | None = None
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        # r(i,k) <- s(i,k) - max_{k' != k} (a(i,k') + s(i,k'))
        combined = avail + sim
        best_idx = np.argmax(combined, axis=1)
        best = combined[rows, best_idx]
        combined[rows, best_idx] = -np.inf
        second = combined.max(axis=1)
        new_resp = sim - best[:, None]
        new_resp[rows, best_idx] = sim[rows, best_idx] - second
        resp = lam * resp + (1.0 - lam) * new_resp

        # a(i,k) <- min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)))
        # a(k,k) <-               sum_{i' != k}          max(0, r(i',k))
        positive = np.maximum(resp, 0.0)
        np.fill_diagonal(positive, resp.diagonal())
        column_total = positive.sum(axis=0)
        new_avail = np.minimum(column_total[None, :] - positive, 0.0)
        new_avail[rows, rows] = column_total - positive.diagonal()
        avail = lam * avail + (1.0 - lam) * new_avail

        exemplars = tuple(int(i) for i in np.flatnonzero(resp.diagonal() + avail.diagonal() > 0))
        if exemplars and exemplars == previous:
            stable_for += 1
            if stable_for >= config.convergence_window:
                converged = True
                break
        else:
            stable_for = 0
        previous = exemplars

    diag_evidence = resp.diagonal() + avail.diagonal()
    exemplar_list = [int(i) for i in np.flatnonzero(diag_evidence > 0)]
    if not exemplar_list:
        exemplar_list = [int(np.argmax(diag_evidence))]
    exemplar_arr = np.asarray(exemplar_list)
    assignments = np.argmax(sim[:, exemplar_arr], axis=1)
    for c, e in enumerate(exemplar_list):
        assignments[e] = c
    objective = float(sim[rows, exemplar_arr[assignments]].sum())
    return ClusteringResult(
        assignments=tuple(int(a) for a in assignments),
        representatives=tuple(exemplar_list),
        objective=objective,
        iterations=iterations,
        converged=converged,
    )


def _pair_values(sets, fn, threads: int) -> np.ndarray:
    n = len(sets)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    values = parallel_map(lambda p: fn(sets[p[0]], sets[p[1]]), pairs, threads)
    mat = np.zeros((n, n), dtype=np.float64)
    for (i, j), v in zip(pairs, values):
        mat[i, j] = v
        mat[j, i] = v
    return mat


def kernel_similarity_matrix(
    sets,
    kernel,
    preference: float | str = "median",
    threads: int = 1,
) -> np.ndarray:
    """Pairwise kernel values with the preference on the diagonal.

    ``preference="median"`` uses the median of the n(n-1)/2 off-diagonal
    values, the usual uninformed choice for affinity propagation.
    """
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one set")
    mat = _pair_values(sets, kernel, threads)
    n = len(sets)
    if preference == "median":
        if n == 1:
            pref = 0.0
        else:
            upper = mat[np.triu_indices(n, k=1)]
            pref = float(np.median(upper))
    else:
        pref = float(preference)
    np.fill_diagonal(mat, pref)
    return mat


def kernel_distance_matrix(sets, kernel, threads: int = 1) -> np.ndarray:
    """Kernel-induced squared distance K(i,i) + K(j,j) - 2 K(i,j)."""
    sets = list(sets)
    cross = _pair_values(sets, kernel, threads)
    self_vals = np.asarray([kernel(s, s) for s in sets], dtype=np.float64)
    dist = self_vals[:, None] + self_vals[None, :] - 2.0 * cross
    np.fill_diagonal(dist, 0.0)
    return dist
