"""Pairwise distances, k-reciprocal neighbor sets, and Jaccard distances.

The similarity between two samples is exp(-euclidean distance) restricted to
the k-reciprocal neighborhood, and the Jaccard distance compares the sparse
similarity rows of two samples by their elementwise min/max sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ReciprocalSets:
    """Per-sample k-reciprocal neighbor index sets; i is a member of sets[i]."""

    k_rr: int
    sets: list[np.ndarray]


@dataclass
class DistanceGraph:
    d_s: np.ndarray  # sparse-by-construction similarity, zero outside reciprocal sets
    d_j: np.ndarray  # Jaccard distance in [0, 1]


def pairwise_euclidean(features: np.ndarray) -> np.ndarray:
    """Full N x N Euclidean distance matrix with an exactly zero diagonal."""
    f = np.asarray(features, dtype=np.float64)
    sq = np.sum(f * f, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def reciprocal_sets(dist: np.ndarray, k_rr: int) -> ReciprocalSets:
    """Mutual k-nearest-neighbor sets under ``dist``.

    kNN(i) is i itself plus its k_rr nearest other samples (distance ties
    break to the lower index); j belongs to sets[i] iff each is in the
    other's kNN list. No expansion step is applied.
    """
    n = len(dist)
    if not 1 <= k_rr < n:
        raise ValueError(f"k_rr must be in [1, {n - 1}], got {k_rr}")
    knn = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row = dist[i].copy()
        row[i] = np.inf
        order = np.argsort(row, kind="stable")[:k_rr]
        knn[i, order] = True
        knn[i, i] = True
    mutual = knn & knn.T
    return ReciprocalSets(k_rr=k_rr, sets=[np.flatnonzero(mutual[i]) for i in range(n)])


def similarity_encoding(dist: np.ndarray, sets: ReciprocalSets) -> np.ndarray:
    """exp(-dist) over each sample's reciprocal set, zero elsewhere."""
    n = len(dist)
    d_s = np.zeros((n, n))
    for i, members in enumerate(sets.sets):
        d_s[i, members] = np.exp(-dist[i, members])
    return d_s


def jaccard_distance(d_s: np.ndarray) -> np.ndarray:
    """1 - min-sum / max-sum of similarity row pairs.

    Uses an inverted column index so cost scales with the nonzero pattern
    rather than N^3. max-sum is recovered as rowsum_i + rowsum_j - min-sum.
    Rows whose max-sum is zero are defined as maximally distant.
    """
    d_s = np.asarray(d_s, dtype=np.float64)
    if np.any(d_s < 0):
        raise ValueError("similarity matrix must be nonnegative")
    n = len(d_s)
    rowsum = d_s.sum(axis=1)
    nonzero_cols = [np.flatnonzero(d_s[:, k]) for k in range(n)]

    min_sum = np.zeros((n, n))
    for i in range(n):
        acc = min_sum[i]
        for k in np.flatnonzero(d_s[i]):
            rows = nonzero_cols[k]
            acc[rows] += np.minimum(d_s[i, k], d_s[rows, k])
    max_sum = rowsum[:, None] + rowsum[None, :] - min_sum

    d_j = np.ones((n, n))
    ok = max_sum > 0
    d_j[ok] = 1.0 - min_sum[ok] / max_sum[ok]
    np.clip(d_j, 0.0, 1.0, out=d_j)
    np.fill_diagonal(d_j, 0.0)
    return d_j


def build_distance_graph(features: np.ndarray, k_rr: int) -> DistanceGraph:
    """Convenience pipeline: euclidean -> reciprocal sets -> d_S -> d_J."""
    dist = pairwise_euclidean(features)
    sets = reciprocal_sets(dist, k_rr)
    d_s = similarity_encoding(dist, sets)
    return DistanceGraph(d_s=d_s, d_j=jaccard_distance(d_s))
