"""Negative mining layered on top of a ContrastBatch and the InfoNCE family.

Rankings, percentile bands and importance weights use detached similarity
values; the selected or synthesized terms stay differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrast import ContrastBatch, ContrastError
from .nn import tensor as T
from .nn.tensor import Tensor
from .objectives import Critic, _require_negatives

MINERS = ("none", "DCL", "HBNM", "HNM", "CNS")


@dataclass(frozen=True)
class MinerSpec:
    kind: str = "none"
    tau_plus: float = 0.1
    beta: float = 1.0
    S: int = 2
    K: int = 8
    l: float = 25.0
    u: float = 75.0

    def __post_init__(self):
        if self.kind not in MINERS:
            raise ValueError(f"miner must be one of {MINERS}, got {self.kind!r}")
        if not 0.0 <= self.tau_plus < 1.0:
            raise ValueError("tau_plus must lie in [0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (self.S >= 1 and 2 * self.S <= self.K):
            raise ValueError("HNM needs 1 <= S and 2S <= K")
        if not 0 <= self.l < self.u <= 100:
            raise ValueError("CNS percentiles need 0 <= l < u <= 100")


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    return (values * (mask / mask.sum(axis=1, keepdims=True))).sum(axis=1)


def _debiased(theta: Tensor, pos: np.ndarray, neg: np.ndarray, tau: float, tau_plus: float,
              neg_weights: np.ndarray | None) -> Tensor:
    s = theta * (1.0 / tau)
    e = T.exp(s)
    if neg_weights is None:
        neg_mean = _masked_mean(e, neg)
    else:
        neg_mean = (e * neg_weights).sum(axis=1)
    pos_mean = _masked_mean(e, pos)
    estimate = (neg_mean - pos_mean * tau_plus) * (1.0 / (1.0 - tau_plus))
    g = T.maximum(estimate, np.exp(-1.0 / tau))
    q = neg.sum(axis=1).astype(np.float64)
    denom = e + T.reshape(g * q, (-1, 1))
    per_pair = T.log(denom) - s
    return _masked_mean(per_pair, pos).mean()


def debiased_infonce_from_similarity(theta: Tensor, pos, neg, tau: float, tau_plus: float = 0.1) -> Tensor:
    return _debiased(theta, pos, neg, tau, tau_plus, None)


def hardness_weights(theta: np.ndarray, neg: np.ndarray, tau: float, beta: float) -> np.ndarray:
    """Self-normalized importance weights over each anchor's negatives, prop. to e^{beta theta / tau}."""
    logits = np.where(neg, beta * theta / tau, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def hardness_infonce_from_similarity(theta: Tensor, pos, neg, tau: float, tau_plus: float = 0.1,
                                     beta: float = 1.0) -> Tensor:
    w = hardness_weights(theta.data, neg, tau, beta)
    return _debiased(theta, pos, neg, tau, tau_plus, w)


def debiased_infonce(batch: ContrastBatch, critic: Critic, tau: float, tau_plus: float = 0.1) -> Tensor:
    _require_negatives(batch, "DCL")
    theta = critic.similarity(batch.anchors, batch.candidates)
    return debiased_infonce_from_similarity(theta, batch.pos_mask, batch.neg_mask, tau, tau_plus)


def hardness_infonce(batch: ContrastBatch, critic: Critic, tau: float, tau_plus: float = 0.1,
                     beta: float = 1.0) -> Tensor:
    _require_negatives(batch, "HBNM")
    theta = critic.similarity(batch.anchors, batch.candidates)
    return hardness_infonce_from_similarity(theta, batch.pos_mask, batch.neg_mask, tau, tau_plus, beta)


def hnm_select(sim: np.ndarray, neg: np.ndarray, S: int, K: int) -> np.ndarray:
    """Per anchor, the candidate indices mixed with it: positions S..2S-1 of the
    2S hardest among its top-K negatives (ranked by similarity, descending)."""
    if not (S >= 1 and K >= 2 * S):
        raise ContrastError(f"HNM needs 1 <= S and 2S <= K, got S={S}, K={K}")
    counts = neg.sum(axis=1)
    if np.any(counts < K):
        raise ContrastError(f"HNM needs at least K={K} negatives per anchor, smallest has {counts.min()}")
    ranked = np.argsort(np.where(neg, -sim, np.inf), axis=1, kind="stable")
    hardest = ranked[:, :K][:, :2 * S]
    return hardest[:, S:2 * S]


def hnm_augment(batch: ContrastBatch, S: int, K: int, rng, sim: np.ndarray | None = None) -> ContrastBatch:
    """Append S synthetic negatives per anchor: alpha * anchor + (1 - alpha) * hard negative.

    ``sim`` ranks the negatives (defaults to cosine similarity of the raw
    embeddings); ``rng.beta(1, 1, size)`` draws the mixing coefficients.
    Synthetic rows are negatives of their own anchor only.
    """
    if sim is None:
        a = batch.anchors.data / np.maximum(np.linalg.norm(batch.anchors.data, axis=1, keepdims=True), 1e-12)
        c = batch.candidates.data / np.maximum(np.linalg.norm(batch.candidates.data, axis=1, keepdims=True), 1e-12)
        sim = a @ c.T
    partners = hnm_select(sim, batch.neg_mask, S, K)
    n_anchor = batch.num_anchors
    alpha = np.asarray(rng.beta(1.0, 1.0, size=(n_anchor, S)), dtype=np.float64)
    owner = np.repeat(np.arange(n_anchor), S)
    a_alpha = alpha.reshape(-1, 1)
    synth = T.take_rows(batch.anchors, owner) * a_alpha + T.take_rows(batch.candidates, partners.ravel()) * (1.0 - a_alpha)
    candidates = T.concat([batch.candidates, synth], axis=0)
    block = owner[None, :] == np.arange(n_anchor)[:, None]
    pos = np.concatenate([batch.pos_mask, np.zeros_like(block)], axis=1)
    neg = np.concatenate([batch.neg_mask, block], axis=1)
    return batch.with_masks(candidates, pos, neg)


def percentile_band(d: np.ndarray, l: float, u: float) -> tuple[float, float]:
    """Band edges at the l-th and u-th percentiles, nearest-rank (values taken from ``d``)."""
    lo, hi = np.percentile(d, [l, u], method="nearest")
    return float(lo), float(hi)


def cns_filter(batch: ContrastBatch, l: float, u: float) -> ContrastBatch:
    """Keep only negatives whose Euclidean distance to the anchor lies in the [l, u] percentile band."""
    if not 0 <= l < u <= 100:
        raise ContrastError("CNS percentiles need 0 <= l < u <= 100")
    a, c = batch.anchors.data, batch.candidates.data
    dist = np.sqrt(((a[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))
    neg = np.zeros_like(batch.neg_mask)
    for i in range(batch.num_anchors):
        cols = np.flatnonzero(batch.neg_mask[i])
        if cols.size == 0:
            continue
        lo, hi = percentile_band(dist[i, cols], l, u)
        keep = (dist[i, cols] >= lo) & (dist[i, cols] <= hi)
        neg[i, cols[keep]] = True
    if not np.all(neg.any(axis=1) | ~batch.neg_mask.any(axis=1)):
        raise ContrastError(f"CNS band [{l}, {u}] left an anchor without negatives; widen the band")
    return batch.with_masks(neg_mask=neg)


def negative_similarity_report(sim: np.ndarray, neg: np.ndarray, anchor_labels, candidate_labels,
                               n_bins: int = 10) -> dict:
    """Share of same-label (false) negatives within each similarity decile."""
    anchor_labels = np.asarray(anchor_labels)
    candidate_labels = np.asarray(candidate_labels)
    rows, cols = np.nonzero(neg)
    values = sim[rows, cols]
    same = anchor_labels[rows] == candidate_labels[cols]
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    bins = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    same_counts = np.bincount(bins, weights=same, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        frac = np.where(counts > 0, same_counts / np.maximum(counts, 1), np.nan)
    return {"edges": edges.tolist(), "counts": counts.tolist(), "same_label_fraction": frac.tolist()}
