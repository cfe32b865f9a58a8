"""Pseudo-label quality (pairwise precision/recall/F-score) and retrieval
metrics (mAP and the CMC curve under the cross-camera protocol)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import OUTLIER


@dataclass
class PairCounts:
    tp: int
    fp: int
    fn: int


@dataclass
class RetrievalResult:
    map: float
    cmc: np.ndarray  # full curve, cmc[r-1] = rank-r accuracy

    def rank(self, r: int) -> float:
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    @property
    def r1(self) -> float:
        return self.rank(1)

    @property
    def r5(self) -> float:
        return self.rank(5)

    @property
    def r10(self) -> float:
        return self.rank(10)


def pairwise_fscore(pseudo: np.ndarray, truth: np.ndarray):
    """Pair-level precision/recall/F against ground-truth identities.

    Outlier samples (pseudo == OUTLIER) are dropped from the pair universe.
    Degenerate denominators (no same-pseudo or no same-truth pair) give 0.
    Returns (precision, recall, fscore, PairCounts).
    """
    pseudo = np.asarray(pseudo)
    truth = np.asarray(truth)
    if pseudo.shape != truth.shape:
        raise ValueError("pseudo and truth label arrays must align")
    keep = pseudo != OUTLIER
    p = pseudo[keep]
    t = truth[keep]
    same_pseudo = (p[:, None] == p[None, :])
    same_truth = (t[:, None] == t[None, :])
    upper = np.triu(np.ones((len(p), len(p)), dtype=bool), k=1)
    tp = int(np.sum(same_pseudo & same_truth & upper))
    fp = int(np.sum(same_pseudo & ~same_truth & upper))
    fn = int(np.sum(~same_pseudo & same_truth & upper))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    fscore = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, fscore, PairCounts(tp, fp, fn)


def retrieval_eval(query_feats, query_ids, query_cams,
                   gallery_feats, gallery_ids, gallery_cams) -> RetrievalResult:
    """Rank the gallery per query by Euclidean distance and score AP/CMC.

    Gallery entries sharing both identity and camera with the query are
    junk and skipped; a query with no remaining match is an error. AP is the
    mean of precision at each relevant rank; distance ties keep gallery
    index order. No re-ranking is applied.
    """
    qf = np.asarray(query_feats, dtype=np.float64)
    gf = np.asarray(gallery_feats, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)

    q2 = np.sum(qf * qf, axis=1)
    g2 = np.sum(gf * gf, axis=1)
    dist = np.sqrt(np.maximum(q2[:, None] + g2[None, :] - 2.0 * qf @ gf.T, 0.0))

    num_g = len(gf)
    aps = np.empty(len(qf))
    hits = np.zeros((len(qf), num_g))
    for qi in range(len(qf)):
        order = np.argsort(dist[qi], kind="stable")
        junk = (gallery_ids[order] == query_ids[qi]) & (gallery_cams[order] == query_cams[qi])
        order = order[~junk]
        good = gallery_ids[order] == query_ids[qi]
        if not good.any():
            raise ValueError(f"query {qi} has no valid cross-camera match")
        ranks = np.flatnonzero(good)
        precision_at_hit = (np.arange(len(ranks)) + 1.0) / (ranks + 1.0)
        aps[qi] = precision_at_hit.mean()
        # rank-r hit indicator over the junk-filtered list, saturating past it
        hits[qi, ranks[0]:] = 1.0
        hits[qi, len(good):] = 1.0
    cmc = hits.mean(axis=0)
    return RetrievalResult(map=float(aps.mean()), cmc=cmc)
