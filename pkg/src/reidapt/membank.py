"""Instant memory bank and the spread-out regularizer.

The bank keeps one unit-norm entry per target-train sample. Each anchor
treats its k nearest bank entries (plus its own slot) as positives and every
other entry as a negative; the regularizer is a softplus-of-sums ranking
loss over those pairs. In instant mode the entries receive analytic
gradients and a descent step every iteration; momentum mode blends in batch
features instead, for ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import l2_normalize

EXP_CLAMP = 60.0  # belt-and-braces cap on exponent arguments


class BankDivergedError(RuntimeError):
    """An update drove a bank entry to the zero vector."""


@dataclass
class MemoryBank:
    v: np.ndarray          # (N, d), unit rows
    mode: str = "instant"  # instant | momentum
    tau: float = 0.01      # momentum blend, used in momentum mode only
    k_pos: int = 6

    def __post_init__(self):
        if self.mode not in ("instant", "momentum"):
            raise ValueError(f"unknown bank mode {self.mode!r}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if self.k_pos < 0:
            raise ValueError("k_pos must be >= 0")

    def __len__(self) -> int:
        return len(self.v)


@dataclass
class NeighborSets:
    """Positive index sets per anchor; row b holds anchor b's own slot too."""

    k_pos: int
    indices: np.ndarray  # (B, min(k_pos + 1, N)) int64, ascending per row

    def mask(self, n: int) -> np.ndarray:
        out = np.zeros((len(self.indices), n), dtype=bool)
        rows = np.arange(len(self.indices))[:, None]
        out[rows, self.indices] = True
        return out


def init_bank(features: np.ndarray, mode: str = "instant", tau: float = 0.01,
              k_pos: int = 6) -> MemoryBank:
    """Bank entries start as the L2-normalized sample features."""
    return MemoryBank(v=l2_normalize(features), mode=mode, tau=tau, k_pos=k_pos)


def positive_sets(bank: MemoryBank, feats: np.ndarray,
                  sample_indices: np.ndarray) -> NeighborSets:
    """k largest dot products against the bank (excluding the anchor's own
    slot), plus the slot itself; similarity ties go to the lower index."""
    feats = np.asarray(feats, dtype=np.float64)
    sample_indices = np.asarray(sample_indices)
    n = len(bank)
    k = min(bank.k_pos, n - 1)
    sims = feats @ bank.v.T
    rows = np.arange(len(feats))
    sims[rows, sample_indices] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    indices = np.concatenate([order, sample_indices[:, None]], axis=1)
    indices.sort(axis=1)
    return NeighborSets(k_pos=bank.k_pos, indices=indices.astype(np.int64))


def _masked_logsumexp(values, mask):
    """Row-wise log-sum-exp over masked entries; empty rows give -inf."""
    x = np.where(mask, values, -np.inf)
    peak = x.max(axis=1)
    shift = np.where(np.isfinite(peak), peak, 0.0)
    sums = np.exp(x - shift[:, None]).sum(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(sums > 0.0, shift + np.log(sums), -np.inf)


def spread_loss(feats: np.ndarray, bank: MemoryBank, sets: NeighborSets,
                margin: float):
    """Spread-out loss averaged over batch anchors, with gradients.

    Per anchor i: log[1 + sum_{k in K_i} sum_{n not in K_i}
    exp(f_i.v_n - f_i.v_k + margin)]. The double sum factorizes into
    independent log-sum-exps over positives and negatives, so both the value
    and the gradients are computed in max-shifted form. Returns
    (loss, grad wrt feats, grad wrt every bank entry).
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    feats = np.asarray(feats, dtype=np.float64)
    b, n = len(feats), len(bank)
    pos = sets.mask(n)
    neg = ~pos

    sims = np.clip(feats @ bank.v.T, -EXP_CLAMP, EXP_CLAMP)
    ln_a = _masked_logsumexp(sims, neg)        # negatives
    ln_b = _masked_logsumexp(-sims, pos)       # positives
    ln_z = margin + ln_a + ln_b
    per_anchor = np.logaddexp(0.0, ln_z)       # log(1 + Z)
    loss = float(per_anchor.mean())

    # d per_anchor / d sims: +exp(m + s_j + ln_b - log1pZ) on negatives,
    #                        -exp(m + ln_a - s_j - log1pZ) on positives
    coef = np.zeros((b, n))
    live = np.isfinite(ln_z)
    if np.any(live):
        log_neg = margin + sims + ln_b[:, None] - per_anchor[:, None]
        log_pos = margin - sims + ln_a[:, None] - per_anchor[:, None]
        coef[neg] = np.exp(log_neg[neg])
        coef[pos] = -np.exp(log_pos[pos])
        coef[~live] = 0.0
    coef /= b

    grad_feats = coef @ bank.v
    grad_v = coef.T @ feats
    return loss, grad_feats, grad_v


def instant_update(bank: MemoryBank, grad_v: np.ndarray, eta: float) -> MemoryBank:
    """Gradient step on every touched entry, then renormalize those rows."""
    if bank.mode != "instant":
        raise ValueError("instant_update requires an instant-mode bank")
    if eta == 0.0:
        return bank
    touched = np.flatnonzero(np.any(grad_v != 0.0, axis=1))
    if len(touched) == 0:
        return bank
    rows = bank.v[touched] - eta * grad_v[touched]
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise BankDivergedError("bank update produced a zero entry")
    bank.v[touched] = rows / norms
    return bank


def momentum_update(bank: MemoryBank, feats: np.ndarray,
                    sample_indices: np.ndarray) -> MemoryBank:
    """Blend batch features into their own slots: v <- tau*v + (1-tau)*f."""
    if bank.mode != "momentum":
        raise ValueError("momentum_update requires a momentum-mode bank")
    idx = np.asarray(sample_indices)
    rows = bank.tau * bank.v[idx] + (1.0 - bank.tau) * np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise BankDivergedError("momentum blend produced a zero entry")
    bank.v[idx] = rows / norms
    return bank
