"""Contrastive objectives. Every function returns a scalar loss to minimize."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contrast import ContrastBatch, ContrastError
from .nn import tensor as T
from .nn.layers import Module
from .nn.optim import ema_update
from .nn.tensor import Tensor

OBJECTIVES = ("InfoNCE", "JSD", "SPJSD", "TM", "BL", "BT", "VICReg")
NEGATIVE_FREE = ("BL", "BT", "VICReg")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "InfoNCE"
    tau: float = 0.5
    epsilon: float = 1.0
    lam: float | None = None  # BT default 1/D; VICReg default 25
    mu: float = 25.0
    gamma: float = 1.0
    ema_decay: float = 0.99
    bn_flags: dict = field(default_factory=lambda: {"encoder": True, "projector": False, "predictor": False})

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.kind!r}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if any(w is not None and w < 0 for w in (self.lam, self.mu, self.gamma)):
            raise ValueError("trade-off weights must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        unknown = set(self.bn_flags) - {"encoder", "projector", "predictor"}
        if unknown:
            raise ValueError(f"unknown bn_flags {sorted(unknown)}")

    @property
    def needs_negatives(self) -> bool:
        return self.kind not in NEGATIVE_FREE


class Critic:
    """Shared projection head ``g`` with cosine similarity and inner-product scores."""

    def __init__(self, projector: Module | None):
        self.projector = projector

    def project(self, x: Tensor) -> Tensor:
        return x if self.projector is None else self.projector(x)

    def similarity(self, a: Tensor, c: Tensor) -> Tensor:
        return T.l2_row_normalize(self.project(a)) @ T.l2_row_normalize(self.project(c)).T

    def scores(self, a: Tensor, c: Tensor) -> Tensor:
        return self.project(a) @ self.project(c).T


def _pair_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Per-anchor mean of ``values`` over the entries selected by ``mask``."""
    counts = mask.sum(axis=1, keepdims=True)
    return (values * (mask / np.maximum(counts, 1))).sum(axis=1)


def _require_negatives(batch: ContrastBatch, name: str) -> None:
    if not batch.neg_mask.any(axis=1).all():
        raise ContrastError(f"{name} needs at least one negative per anchor; "
                            "use BL, BT or VICReg for negative-free training")


# --
# Negative-sample objectives

def infonce_from_similarity(theta: Tensor, pos: np.ndarray, neg: np.ndarray, tau: float) -> Tensor:
    s = theta * (1.0 / tau)
    lse_neg = T.masked_logsumexp(s, neg, axis=1)
    # -log e^{s_p} / (e^{s_p} + sum_q e^{s_q}) = softplus(lse_neg - s_p)
    per_pair = T.softplus(T.reshape(lse_neg, (-1, 1)) - s)
    return _pair_mean(per_pair, pos).mean()


def infonce(batch: ContrastBatch, critic: Critic, tau: float) -> Tensor:
    _require_negatives(batch, "InfoNCE")
    theta = critic.similarity(batch.anchors, batch.candidates)
    return infonce_from_similarity(theta, batch.pos_mask, batch.neg_mask, tau)


def jsd_from_scores(scores: Tensor, pos: np.ndarray, neg: np.ndarray) -> Tensor:
    d = T.clamp(T.sigmoid(scores), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos_term = _pair_mean(T.log(d), pos)
    neg_term = _pair_mean(T.log(1.0 - d), neg)
    return -(pos_term + neg_term).mean()


def sp_jsd_from_scores(scores: Tensor, pos: np.ndarray, neg: np.ndarray) -> Tensor:
    pos_term = _pair_mean(T.softplus(-scores), pos)
    neg_term = _pair_mean(T.softplus(scores), neg)
    return (pos_term + neg_term).mean()


def jsd(batch: ContrastBatch, critic: Critic) -> Tensor:
    _require_negatives(batch, "JSD")
    return jsd_from_scores(critic.scores(batch.anchors, batch.candidates), batch.pos_mask, batch.neg_mask)


def sp_jsd(batch: ContrastBatch, critic: Critic) -> Tensor:
    _require_negatives(batch, "SP-JSD")
    return sp_jsd_from_scores(critic.scores(batch.anchors, batch.candidates), batch.pos_mask, batch.neg_mask)


def triplet(batch: ContrastBatch, epsilon: float = 1.0) -> Tensor:
    """Hinge on mean positive distance minus mean negative distance, raw embeddings."""
    _require_negatives(batch, "TM")
    dist = T.row_distances(batch.anchors, batch.candidates)
    gap = _pair_mean(dist, batch.pos_mask) - _pair_mean(dist, batch.neg_mask) + epsilon
    return T.maximum(gap, 0.0).mean()


# --
# Negative-free objectives

def bootstrap_latent(pred: Tensor, target: Tensor, pos: np.ndarray) -> Tensor:
    """Mean over anchors of -cos(prediction, target) averaged over each anchor's positives."""
    cos = T.l2_row_normalize(pred) @ T.l2_row_normalize(target).T
    return -_pair_mean(cos, pos).mean()


def _standardize(z: Tensor) -> Tensor:
    centered = z - z.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0, keepdims=True)
    if np.any(var.data <= 0):
        raise ContrastError("Barlow Twins: a column has zero variance over the batch and cannot be standardized")
    return centered / T.sqrt(var)


def barlow_twins(z1: Tensor, z2: Tensor, lam: float | None = None) -> Tensor:
    if z1.shape != z2.shape:
        raise T.ShapeError(f"barlow_twins: shapes {z1.shape} and {z2.shape} differ")
    n, d = z1.shape
    if n < 2:
        raise ContrastError("Barlow Twins needs a batch of at least 2")
    lam = 1.0 / d if lam is None else lam
    c = (_standardize(z1).T @ _standardize(z2)) * (1.0 / n)
    eye = np.eye(d)
    on = ((c - 1.0) * (c - 1.0) * eye).sum()
    off = (c * c * (1.0 - eye)).sum()
    return on + off * lam


def _variance_hinge(z: Tensor, eps: float) -> Tensor:
    n = z.shape[0]
    centered = z - z.mean(axis=0, keepdims=True)
    var = (centered * centered).sum(axis=0) * (1.0 / (n - 1))
    return T.relu(1.0 - T.sqrt(var + eps)).mean()


def _covariance_penalty(z: Tensor) -> Tensor:
    n, d = z.shape
    centered = z - z.mean(axis=0, keepdims=True)
    cov = (centered.T @ centered) * (1.0 / (n - 1))
    return (cov * cov * (1.0 - np.eye(d))).sum() * (1.0 / d)


def vicreg(z1: Tensor, z2: Tensor, lam: float = 25.0, mu: float = 25.0, gamma: float = 1.0,
           eps: float = 1e-4) -> Tensor:
    """Invariance + variance hinge + covariance penalty.

    ``eps`` keeps the standard-deviation gradient finite for collapsed columns.
    """
    if z1.shape != z2.shape:
        raise T.ShapeError(f"vicreg: shapes {z1.shape} and {z2.shape} differ")
    n = z1.shape[0]
    if n < 2:
        raise ContrastError("VICReg needs a batch of at least 2")
    diff = z1 - z2
    invariance = (diff * diff).sum() * (1.0 / n)
    variance = _variance_hinge(z1, eps) + _variance_hinge(z2, eps)
    covariance = _covariance_penalty(z1) + _covariance_penalty(z2)
    return invariance * lam + variance * mu + covariance * gamma


# --
# Bootstrapped dual encoders

class BootstrapNetworks:
    """Online encoder/projector/predictor with an EMA target encoder/projector."""

    def __init__(self, encoder: Module, projector: Module, predictor: Module, ema_decay: float = 0.99):
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.target_encoder = encoder.frozen_copy()
        self.target_projector = projector.frozen_copy()
        self.ema_decay = ema_decay

    def online_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.projector.parameters() + self.predictor.parameters()

    def update_target(self) -> None:
        ema_update(self.target_encoder.parameters(), self.encoder.parameters(), self.ema_decay)
        ema_update(self.target_projector.parameters(), self.projector.parameters(), self.ema_decay)

    def predict(self, x: Tensor) -> Tensor:
        return self.predictor(self.projector(x))

    def target(self, x: Tensor) -> Tensor:
        return self.target_projector(x).detach()


def bl_loss(nets: BootstrapNetworks, batch_12: ContrastBatch, batch_21: ContrastBatch) -> Tensor:
    """Symmetric bootstrap loss.

    Each batch holds online encoder outputs as anchors and target encoder
    outputs as candidates; the two view directions are summed.
    """
    total = None
    for b in (batch_12, batch_21):
        term = bootstrap_latent(nets.predict(b.anchors), nets.target(b.candidates), b.pos_mask)
        total = term if total is None else total + term
    return total


def bl_step(nets: BootstrapNetworks, view1, view2, make_batches, optimizer) -> float:
    """One optimization step of the bootstrapped objective followed by the EMA update.

    ``make_batches(encoder, target_encoder, view_a, view_b)`` returns the
    ContrastBatch pairing online embeddings of ``view_a`` with target
    embeddings of ``view_b`` for the active contrasting mode.
    """
    b12 = make_batches(nets.encoder, nets.target_encoder, view1, view2)
    b21 = make_batches(nets.encoder, nets.target_encoder, view2, view1)
    loss = bl_loss(nets, b12, b21)
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    nets.update_target()
    return loss.item()
