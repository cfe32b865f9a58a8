"""Pseudo-label refinement: per-cluster prototype selection and reassignment
by average prototype similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import CoarseClusters, kmeans
from .data import OUTLIER, l2_normalize


@dataclass
class PseudoLabelSet:
    coarse: np.ndarray   # (N,) int64, DBSCAN label or OUTLIER
    refined: np.ndarray  # (N,) int64, prototype-similarity label or OUTLIER
    num_clusters: int

    def __post_init__(self):
        if not np.array_equal(self.coarse == OUTLIER, self.refined == OUTLIER):
            raise ValueError("refined must be OUTLIER exactly where coarse is")

    @property
    def non_outliers(self) -> np.ndarray:
        return np.flatnonzero(self.coarse != OUTLIER)

    def relabel_fraction(self) -> float:
        """Fraction of non-outlier samples whose refined label moved."""
        keep = self.non_outliers
        if len(keep) == 0:
            return 0.0
        return float(np.mean(self.coarse[keep] != self.refined[keep]))


@dataclass
class PrototypeSet:
    """Unit-norm prototype rows per coarse cluster, clamped to cluster size."""

    prototypes: list[np.ndarray]  # entry l: (R_l, d)

    @property
    def num_clusters(self) -> int:
        return len(self.prototypes)


def select_prototypes(features: np.ndarray, coarse: CoarseClusters, r: int,
                      seed) -> PrototypeSet:
    """Fine k-means inside every coarse cluster; centers become prototypes.

    Each cluster contributes min(r, cluster size) prototypes and every
    prototype is L2-normalized after averaging.
    """
    if r < 1:
        raise ValueError("prototype count must be >= 1")
    seed = (seed,) if np.isscalar(seed) else tuple(seed)
    normalized = l2_normalize(features)
    prototypes = []
    for label in range(coarse.num_clusters):
        members = coarse.members(label)
        r_l = min(r, len(members))
        result = kmeans(normalized[members], r_l, seed=seed + (label,))
        prototypes.append(l2_normalize(result.centers))
    return PrototypeSet(prototypes=prototypes)


def refined_similarity(features: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Score matrix s[i, l]: mean dot product of sample i against cluster l's
    prototypes. Features must be L2-normalized."""
    features = np.asarray(features, dtype=np.float64)
    scores = np.empty((len(features), protos.num_clusters))
    for label, cents in enumerate(protos.prototypes):
        scores[:, label] = (features @ cents.T).mean(axis=1)
    return scores


def assign_refined_labels(scores: np.ndarray, coarse: CoarseClusters) -> PseudoLabelSet:
    """argmax over refined scores for non-outliers; ties go to the lowest
    cluster index and outliers stay outliers."""
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    refined = np.full(len(scores), OUTLIER, dtype=np.int64)
    keep = coarse.assignment != OUTLIER
    refined[keep] = np.argmax(scores[keep], axis=1)
    return PseudoLabelSet(coarse=coarse.assignment.copy(), refined=refined,
                          num_clusters=coarse.num_clusters)


def refine_labels(features: np.ndarray, coarse: CoarseClusters, r: int,
                  seed) -> tuple[PseudoLabelSet, PrototypeSet]:
    """Full refinement pass; ``features`` need not be pre-normalized."""
    protos = select_prototypes(features, coarse, r, seed)
    scores = refined_similarity(l2_normalize(features), protos)
    return assign_refined_labels(scores, coarse), protos
