"""Supervised metric losses with analytic gradients.

Cross-entropy over softmax probabilities, batch-hard triplet with hinge
margin, the convex blend of noisy- and refined-label losses, and the joint
objective that adds the weighted spread-out regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossReport:
    """Per-iteration loss breakdown; ``total`` honors the alpha/mu weighting."""

    cls_noisy: float
    cls_refined: float
    tri_noisy: float
    tri_refined: float
    spread: float
    total: float
    alpha: float
    mu: float
    grad_features: np.ndarray | None = None

    @property
    def cls(self) -> float:
        return (1.0 - self.alpha) * self.cls_noisy + self.alpha * self.cls_refined

    @property
    def tri(self) -> float:
        return (1.0 - self.alpha) * self.tri_noisy + self.alpha * self.tri_refined


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood; gradient is returned w.r.t. the logits."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    b, num_classes = probs.shape
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError("label out of range")
    picked = probs[np.arange(b), labels]
    loss = float(-np.mean(np.log(picked)))
    grad_logits = probs.copy()
    grad_logits[np.arange(b), labels] -= 1.0
    return loss, grad_logits / b


def batch_hard_triplet(features: np.ndarray, labels: np.ndarray, margin: float):
    """Hinge on the hardest positive/negative per anchor.

    Anchors lacking an in-batch positive or negative are skipped; a batch
    where no anchor qualifies violates the PK-sampling precondition. The
    hinge subgradient at zero activation is zero, as is the distance
    gradient for coincident pairs; hardest-pair ties go to the lowest index.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if margin < 0:
        raise ValueError("margin must be >= 0")
    b = len(f)
    diff = f[:, None, :] - f[None, :, :]
    dist = np.sqrt(np.maximum(np.sum(diff * diff, axis=2), 0.0))
    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)

    grad = np.zeros_like(f)
    total = 0.0
    active_anchors = 0
    contributions = []
    for i in range(b):
        pos_mask = same[i] & ~eye[i]
        neg_mask = ~same[i]
        if not pos_mask.any() or not neg_mask.any():
            continue
        active_anchors += 1
        pos_dist = np.where(pos_mask, dist[i], -np.inf)
        neg_dist = np.where(neg_mask, dist[i], np.inf)
        p = int(np.argmax(pos_dist))
        n = int(np.argmin(neg_dist))
        violation = margin + dist[i, p] - dist[i, n]
        if violation > 0:
            total += violation
            contributions.append((i, p, n))
    if active_anchors == 0:
        raise ValueError("batch has no anchor with both a positive and a negative")

    loss = total / active_anchors
    for i, p, n in contributions:
        if dist[i, p] > 0:
            u = (f[i] - f[p]) / dist[i, p]
            grad[i] += u
            grad[p] -= u
        if dist[i, n] > 0:
            w = (f[i] - f[n]) / dist[i, n]
            grad[i] -= w
            grad[n] += w
    return loss, grad / active_anchors


def blend_metric_losses(noisy: tuple, refined: tuple, alpha: float):
    """Convex blend (1-alpha)*noisy + alpha*refined of (cls, tri) pairs."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    cls = (1.0 - alpha) * noisy[0] + alpha * refined[0]
    tri = (1.0 - alpha) * noisy[1] + alpha * refined[1]
    return cls, tri


def total_loss(cls: float, tri: float, spread: float, mu: float) -> float:
    """Joint objective: blended metric losses plus mu times the regularizer."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return cls + tri + mu * spread
