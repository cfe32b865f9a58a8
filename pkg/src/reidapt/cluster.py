"""Coarse density clustering (DBSCAN on a precomputed distance matrix) and
fine centroid clustering (k-means with k-means++ seeding)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import OUTLIER


@dataclass
class CoarseClusters:
    assignment: np.ndarray  # (N,) int64, cluster id or OUTLIER
    num_clusters: int

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == label)


@dataclass
class KMeansResult:
    centers: np.ndarray          # (R, d)
    assignment: np.ndarray       # (M,) int64
    inertia: float
    inertia_history: list[float]


def dbscan(d_j: np.ndarray, eps: float, min_pts: int) -> CoarseClusters:
    """Density clustering over a symmetric distance matrix.

    Core points have at least ``min_pts`` neighbors within ``eps`` (self
    included). Clusters are the connected components of the core-core
    eps-graph; border points join the lowest-indexed core that reaches them,
    which makes the labeling independent of input permutation up to that tie
    rule. Everything else is an outlier.
    """
    d_j = np.asarray(d_j, dtype=np.float64)
    n = len(d_j)
    if d_j.shape != (n, n) or not np.allclose(d_j, d_j.T, atol=1e-8):
        raise ValueError("distance matrix must be square and symmetric")
    if np.any(d_j < 0):
        raise ValueError("distance matrix must be nonnegative")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")

    within = d_j <= eps
    degree = within.sum(axis=1)
    core = degree >= min_pts

    assignment = np.full(n, OUTLIER, dtype=np.int64)
    next_label = 0
    for start in range(n):
        if not core[start] or assignment[start] != OUTLIER:
            continue
        # flood the core-core component
        stack = [start]
        assignment[start] = next_label
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(within[u] & core):
                if assignment[v] == OUTLIER:
                    assignment[v] = next_label
                    stack.append(v)
        next_label += 1

    core_indices = np.flatnonzero(core)
    for i in range(n):
        if core[i] or assignment[i] != OUTLIER:
            continue
        reachable = core_indices[within[i, core_indices]]
        if len(reachable):
            assignment[i] = assignment[reachable[0]]  # lowest-indexed claiming core
    return CoarseClusters(assignment=assignment, num_clusters=next_label)


def _kmeans_pp_init(points, r, rng):
    """k-means++ seeding: each next center drawn with probability proportional
    to squared distance from the chosen set."""
    m = len(points)
    centers = np.empty((r, points.shape[1]))
    first = int(rng.integers(m))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, r):
        total = d2.sum()
        if total == 0.0:
            centers[c] = points[int(rng.integers(m))]
            continue
        probs = d2 / total
        pick = int(rng.choice(m, p=probs))
        centers[c] = points[pick]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def _lloyd(points, centers, max_iter):
    m, r = len(points), len(centers)
    assignment = np.full(m, -1, dtype=np.int64)
    history = []
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assignment = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(m), new_assignment].sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(r):
            mask = assignment == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
            else:
                # reseed an empty center at the point farthest from its center
                worst = int(np.argmax(d2[np.arange(m), assignment]))
                centers[c] = points[worst]
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(m), assignment].sum())
    return centers, assignment, inertia, history


def kmeans(points: np.ndarray, r: int, seed, max_iter: int = 100, n_init: int = 1) -> KMeansResult:
    """Lloyd iterations from k-means++ starts; deterministic given ``seed``.

    ``n_init`` independent starts are run and the lowest-inertia result kept.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if not 1 <= r <= m:
        raise ValueError(f"cluster count must be in [1, {m}], got {r}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp_init(points, r, rng)
        centers, assignment, inertia, history = _lloyd(points, centers.copy(), max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centers, assignment, inertia, history)
    return best
