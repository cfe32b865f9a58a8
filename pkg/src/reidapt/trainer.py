"""Alternating training: source pretraining, off-line pseudo-label epochs,
and on-line iterations that update encoder, classifier, and memory bank.

Ground-truth target identities never feed a gradient path; they enter only
through the optional diagnostics argument and are used for F-score rows in
the metrics log.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cluster import dbscan
from .data import OUTLIER, l2_normalize
from .encoder import (
    EncoderState,
    LrSchedule,
    adam_step,
    backward,
    classifier_backward,
    classifier_forward,
    forward,
    init_classifier,
    init_encoder,
    lr_at,
)
from .evaluate import pairwise_fscore
from .graph import build_distance_graph
from .losses import LossReport, batch_hard_triplet, blend_metric_losses, cross_entropy, total_loss
from .membank import MemoryBank, init_bank, instant_update, momentum_update, positive_sets, spread_loss
from .refine import PseudoLabelSet, refine_labels

# sub-stream tags so every stage draws from its own deterministic generator
_PRETRAIN_STREAM = 1
_ADAPT_STREAM = 2


class ConfigError(ValueError):
    """A training-configuration key is unknown or out of range."""


class ZeroClustersError(RuntimeError):
    """DBSCAN marked every sample as an outlier."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite or the bank collapsed."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; the defaults reproduce the reference regime."""

    alpha: float = 0.5             # refined-label weight in the loss blend
    mu: float = 0.1                # spread-out regularizer weight
    margin: float = 0.3            # triplet hinge margin
    spread_margin: float = 0.35    # spread-out margin
    k_pos: int = 6                 # positives per anchor in the bank
    fine_clusters: int = 5         # prototypes per coarse cluster
    k_rr: int = 20                 # reciprocal-neighborhood size
    eps_percentile: float = 1.6    # DBSCAN eps percentile of off-diagonal d_J
    min_pts: int = 4
    batch_p: int = 16              # pseudo-labels per batch
    batch_k: int = 4               # samples per pseudo-label
    epochs: int = 40
    iters_per_epoch: int = 0       # 0 = one pass over the non-outliers
    pretrain_epochs: int = 80
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    pretrain_decay_epochs: tuple = (40, 70)
    adapt_decay_epochs: tuple = (20,)
    decay_factor: float = 10.0
    weight_decay: float = 5e-4
    feat_dim: int = 32
    hidden_dim: int = 0            # 0 = twice feat_dim
    bank_mode: str = "instant"
    bank_tau: float = 0.01
    seed: int = 0

    def validate(self):
        checks = [
            ("alpha", 0.0 <= self.alpha <= 1.0),
            ("mu", self.mu >= 0.0),
            ("margin", self.margin >= 0.0),
            ("spread_margin", self.spread_margin >= 0.0),
            ("k_pos", self.k_pos >= 0),
            ("fine_clusters", self.fine_clusters >= 1),
            ("k_rr", self.k_rr >= 1),
            ("eps_percentile", 0.0 < self.eps_percentile < 100.0),
            ("min_pts", self.min_pts >= 1),
            ("batch_p", self.batch_p >= 2),
            ("batch_k", self.batch_k >= 2),
            ("epochs", self.epochs >= 0),
            ("iters_per_epoch", self.iters_per_epoch >= 0),
            ("pretrain_epochs", self.pretrain_epochs >= 0),
            ("base_lr", self.base_lr >= 0.0),
            ("warmup_epochs", self.warmup_epochs >= 0),
            ("decay_factor", self.decay_factor > 1.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("feat_dim", self.feat_dim >= 1),
            ("hidden_dim", self.hidden_dim >= 0),
            ("bank_mode", self.bank_mode in ("instant", "momentum")),
            ("bank_tau", 0.0 <= self.bank_tau < 1.0),
            ("seed", self.seed >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"config key {name!r} is out of range "
                                  f"(got {getattr(self, name)!r})")

    @property
    def batch_size(self) -> int:
        return self.batch_p * self.batch_k

    @property
    def hidden(self) -> int:
        return self.hidden_dim or 2 * self.feat_dim

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        doc = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in doc.items()}


@dataclass
class EpochState:
    epoch: int
    labels: PseudoLabelSet
    prototypes: object
    num_clusters: int
    outliers: int
    eps: float
    d_j: np.ndarray | None = None
    fscore_coarse: float | None = None
    fscore_refined: float | None = None


@dataclass
class EpochMetrics:
    epoch: int
    num_clusters: int
    outliers: int
    fscore_coarse: float | None
    fscore_refined: float | None
    cls: float
    tri: float
    spread: float
    total: float


def extract_features(state: EncoderState, raw: np.ndarray, normalized: bool = True):
    feats, _ = forward(state, raw)
    return l2_normalize(feats) if normalized else feats


def pk_sample(labels: PseudoLabelSet, p: int, k: int, rng,
              use_refined: bool = True) -> np.ndarray:
    """P distinct pseudo-labels, K members each (with replacement only when a
    cluster is smaller than K); outliers never appear.

    Groups follow the refined labels when ``use_refined`` (they coincide with
    the coarse labels wherever refinement kept them); a pure coarse-label run
    samples by coarse labels instead.
    """
    source = labels.refined if use_refined else labels.coarse
    eligible = np.unique(source[source != OUTLIER])
    if len(eligible) < p:
        raise ValueError(f"need {p} clusters for a batch, have {len(eligible)}")
    chosen = rng.choice(eligible, size=p, replace=False)
    picks = []
    for label in chosen:
        members = np.flatnonzero(source == label)
        picks.append(rng.choice(members, size=k, replace=len(members) < k))
    return np.concatenate(picks)


def offline_epoch(state: EncoderState, raw: np.ndarray, cfg: TrainConfig,
                  epoch: int, truth: np.ndarray | None = None,
                  keep_graph: bool = False) -> EpochState:
    """Feature extraction, Jaccard graph, DBSCAN, prototype refinement.

    ``truth`` is a diagnostics-only channel: when given, coarse and refined
    pair F-scores are recorded. It never influences the labels.
    """
    feats = extract_features(state, raw)
    graph = build_distance_graph(feats, k_rr=min(cfg.k_rr, len(feats) - 1))
    off_diag = graph.d_j[~np.eye(len(feats), dtype=bool)]
    eps = max(float(np.percentile(off_diag, cfg.eps_percentile)), 1e-12)
    coarse = dbscan(graph.d_j, eps, cfg.min_pts)
    if coarse.num_clusters == 0:
        raise ZeroClustersError(
            f"epoch {epoch}: every sample is an outlier (eps={eps:.4g})")
    labels, protos = refine_labels(feats, coarse, cfg.fine_clusters,
                                   seed=(cfg.seed, _ADAPT_STREAM, epoch))
    es = EpochState(
        epoch=epoch, labels=labels, prototypes=protos,
        num_clusters=coarse.num_clusters,
        outliers=int(np.sum(coarse.assignment == OUTLIER)),
        eps=eps, d_j=graph.d_j if keep_graph else None,
    )
    if truth is not None:
        es.fscore_coarse = pairwise_fscore(labels.coarse, truth)[2]
        es.fscore_refined = pairwise_fscore(labels.refined, truth)[2]
    return es


def _triplet_or_zero(feats, labels, margin):
    """Batch-hard triplet, or a zero contribution when the batch cannot form
    a single (anchor, positive, negative) triple under these labels."""
    labels = np.asarray(labels)
    counts = np.unique(labels, return_counts=True)[1]
    if len(counts) < 2 or not np.any(counts >= 2):
        return 0.0, np.zeros_like(feats)
    return batch_hard_triplet(feats, labels, margin)


def joint_loss_and_grads(state: EncoderState, bank: MemoryBank, x: np.ndarray,
                         coarse: np.ndarray, refined: np.ndarray,
                         sample_indices: np.ndarray, cfg: TrainConfig):
    """Joint objective on one batch with every analytic gradient.

    Returns (report, param grads incl. classifier, bank gradient). The bank
    gradient is for the unweighted regularizer, which is what the bank's own
    descent step uses.
    """
    feats, cache = forward(state, x)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise TrainingDivergedError("encoder produced a zero feature vector")
    feats_n = feats / norms

    probs = classifier_forward(state, feats)
    cls_noisy, g_logits_noisy = cross_entropy(probs, coarse)
    cls_refined, g_logits_refined = cross_entropy(probs, refined)
    tri_noisy, g_tri_noisy = _triplet_or_zero(feats, coarse, cfg.margin)
    tri_refined, g_tri_refined = _triplet_or_zero(feats, refined, cfg.margin)

    sets = positive_sets(bank, feats_n, sample_indices)
    spread, g_feats_n, g_bank = spread_loss(feats_n, bank, sets, cfg.spread_margin)

    cls_blend, tri_blend = blend_metric_losses(
        (cls_noisy, tri_noisy), (cls_refined, tri_refined), cfg.alpha)
    total = total_loss(cls_blend, tri_blend, spread, cfg.mu)
    if not np.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss (cls={cls_blend}, tri={tri_blend}, spread={spread})")

    g_logits = (1.0 - cfg.alpha) * g_logits_noisy + cfg.alpha * g_logits_refined
    cls_grads, g_feats = classifier_backward(state, feats, g_logits)
    g_feats = g_feats + (1.0 - cfg.alpha) * g_tri_noisy + cfg.alpha * g_tri_refined
    if cfg.mu:
        # chain the spread gradient through the row normalization
        inner = np.sum(g_feats_n * feats_n, axis=1, keepdims=True)
        g_feats = g_feats + cfg.mu * (g_feats_n - inner * feats_n) / norms

    grads, _ = backward(state, cache, g_feats)
    grads.update(cls_grads)
    report = LossReport(cls_noisy=cls_noisy, cls_refined=cls_refined,
                        tri_noisy=tri_noisy, tri_refined=tri_refined,
                        spread=spread, total=total, alpha=cfg.alpha, mu=cfg.mu,
                        grad_features=g_feats)
    return report, grads, g_bank, feats_n


def online_iteration(state: EncoderState, bank: MemoryBank, raw: np.ndarray,
                     batch: np.ndarray, labels: PseudoLabelSet,
                     cfg: TrainConfig, lr: float) -> LossReport:
    """One joint step: metric losses under both labelings, spread-out over
    the bank, Adam on encoder+classifier, gradient (or momentum) bank update."""
    report, grads, g_bank, feats_n = joint_loss_and_grads(
        state, bank, raw[batch], labels.coarse[batch], labels.refined[batch],
        batch, cfg)
    adam_step(state, grads, lr, cfg.weight_decay)
    if bank.mode == "instant":
        # the bank descends the unweighted regularizer at the network rate
        instant_update(bank, g_bank, lr)
    else:
        momentum_update(bank, feats_n, batch)
    return report


def _pk_iterations(cfg: TrainConfig, non_outliers: int) -> int:
    if cfg.iters_per_epoch:
        return cfg.iters_per_epoch
    return max(1, math.ceil(non_outliers / cfg.batch_size))


def pretrain_source(raw: np.ndarray, identities: np.ndarray,
                    cfg: TrainConfig) -> EncoderState:
    """Supervised pretraining with cross-entropy plus triplet on true labels."""
    cfg.validate()
    rng = np.random.default_rng((cfg.seed, _PRETRAIN_STREAM))
    classes, ids = np.unique(identities, return_inverse=True)
    state = init_encoder(raw.shape[1], cfg.hidden, cfg.feat_dim, rng)
    init_classifier(state, len(classes), rng)
    labels = PseudoLabelSet(coarse=ids.astype(np.int64),
                            refined=ids.astype(np.int64),
                            num_clusters=len(classes))
    schedule = LrSchedule(cfg.base_lr, warmup_epochs=cfg.warmup_epochs,
                          decay_epochs=cfg.pretrain_decay_epochs,
                          decay_factor=cfg.decay_factor)
    p = min(cfg.batch_p, len(classes))
    iters = _pk_iterations(cfg, len(raw))
    for epoch in range(cfg.pretrain_epochs):
        lr = lr_at(schedule, epoch)
        epoch_rng = np.random.default_rng((cfg.seed, _PRETRAIN_STREAM, epoch))
        for _ in range(iters):
            batch = pk_sample(labels, p, cfg.batch_k, epoch_rng)
            x = raw[batch]
            feats, cache = forward(state, x)
            probs = classifier_forward(state, feats)
            cls, g_logits = cross_entropy(probs, ids[batch])
            tri, g_tri = _triplet_or_zero(feats, ids[batch], cfg.margin)
            if not np.isfinite(cls + tri):
                raise TrainingDivergedError("non-finite pretraining loss")
            cls_grads, g_feats = classifier_backward(state, feats, g_logits)
            grads, _ = backward(state, cache, g_feats + g_tri)
            grads.update(cls_grads)
            adam_step(state, grads, lr, cfg.weight_decay)
    return state


def source_top1_accuracy(state: EncoderState, raw: np.ndarray,
                         identities: np.ndarray) -> float:
    classes, ids = np.unique(identities, return_inverse=True)
    probs = classifier_forward(state, forward(state, raw)[0])
    return float(np.mean(np.argmax(probs, axis=1) == ids))


def adapt(state: EncoderState, raw: np.ndarray, cfg: TrainConfig,
          truth: np.ndarray | None = None, bank: MemoryBank | None = None,
          start_epoch: int = 0, on_epoch=None):
    """Alternating adaptation; returns (state, per-epoch metrics, bank).

    ``truth`` feeds diagnostics only. ``bank``/``start_epoch`` support
    resuming from a checkpointed run; ``on_epoch`` is called with
    (EpochMetrics, state, bank, iteration reports, PseudoLabelSet) after
    every epoch.
    """
    cfg.validate()
    if bank is None:
        bank = init_bank(forward(state, raw)[0], mode=cfg.bank_mode,
                         tau=cfg.bank_tau, k_pos=cfg.k_pos)
    schedule = LrSchedule(cfg.base_lr, warmup_epochs=0,
                          decay_epochs=cfg.adapt_decay_epochs,
                          decay_factor=cfg.decay_factor)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        es = offline_epoch(state, raw, cfg, epoch, truth)
        epoch_rng = np.random.default_rng((cfg.seed, _ADAPT_STREAM, epoch, 1))
        init_classifier(state, es.num_clusters, epoch_rng)
        p = cfg.batch_p
        use_refined = cfg.alpha > 0.0
        grouping = es.labels.refined if use_refined else es.labels.coarse
        populated = len(np.unique(grouping[grouping != OUTLIER]))
        if populated < p:
            warnings.warn(f"epoch {epoch}: only {populated} populated clusters; "
                          f"reducing batch labels from {p}")
            p = populated
        non_outliers = len(raw) - es.outliers
        iters = _pk_iterations(cfg, non_outliers)
        lr = lr_at(schedule, epoch)
        reports = []
        for _ in range(iters):
            batch = pk_sample(es.labels, p, cfg.batch_k, epoch_rng,
                              use_refined=use_refined)
            reports.append(online_iteration(state, bank, raw, batch,
                                            es.labels, cfg, lr))
        metrics = EpochMetrics(
            epoch=epoch, num_clusters=es.num_clusters, outliers=es.outliers,
            fscore_coarse=es.fscore_coarse, fscore_refined=es.fscore_refined,
            cls=float(np.mean([r.cls for r in reports])),
            tri=float(np.mean([r.tri for r in reports])),
            spread=float(np.mean([r.spread for r in reports])),
            total=float(np.mean([r.total for r in reports])),
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics, state, bank, reports, es.labels)
    return state, history, bank


def _fmt(value) -> str:
    return "" if value is None else repr(value)


def metrics_csv_lines(history) -> list[str]:
    lines = ["epoch,num_clusters,outliers,fscore_coarse,fscore_refined,cls,tri,spread,total"]
    for m in history:
        lines.append(",".join([
            str(m.epoch), str(m.num_clusters), str(m.outliers),
            _fmt(m.fscore_coarse), _fmt(m.fscore_refined),
            _fmt(m.cls), _fmt(m.tri), _fmt(m.spread), _fmt(m.total),
        ]))
    return lines


def loss_csv_lines(rows) -> list[str]:
    """rows: iterable of (epoch, iteration, LossReport)."""
    lines = ["epoch,iter,cls,tri,spread,total"]
    for epoch, iteration, r in rows:
        lines.append(",".join([
            str(epoch), str(iteration),
            _fmt(r.cls), _fmt(r.tri), _fmt(r.spread), _fmt(r.total),
        ]))
    return lines
