"""Contrasting modes: which embedding pairs are positives and which are negatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import tensor as T
from .nn.tensor import Tensor

MODES = ("LL", "GL", "GG")
BRANCHES = ("dual", "single")


class ContrastError(ValueError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    mode: str = "LL"
    branch: str = "dual"
    intra_view_negatives: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if self.branch == "single" and self.mode != "GL":
            raise ValueError("single-branch contrasting is only defined for the GL mode")


@dataclass(frozen=True, eq=False)
class ContrastBatch:
    """Anchors x candidates with boolean positive / negative masks."""

    anchors: Tensor
    candidates: Tensor
    pos_mask: np.ndarray
    neg_mask: np.ndarray

    def __post_init__(self):
        shape = (self.anchors.shape[0], self.candidates.shape[0])
        if self.pos_mask.shape != shape or self.neg_mask.shape != shape:
            raise ContrastError(f"mask shapes {self.pos_mask.shape}/{self.neg_mask.shape} do not match {shape}")
        if np.any(self.pos_mask & self.neg_mask):
            raise ContrastError("a pair is marked both positive and negative")
        if not np.all(self.pos_mask.any(axis=1)):
            raise ContrastError("every anchor needs at least one positive")

    @property
    def num_anchors(self) -> int:
        return self.pos_mask.shape[0]

    def has_negatives(self) -> bool:
        return bool(np.all(self.neg_mask.any(axis=1)))

    def with_masks(self, candidates: Tensor | None = None, pos_mask=None, neg_mask=None) -> "ContrastBatch":
        return ContrastBatch(
            self.anchors,
            self.candidates if candidates is None else candidates,
            self.pos_mask if pos_mask is None else pos_mask,
            self.neg_mask if neg_mask is None else neg_mask,
        )


def aligned_pairs(ids_u: np.ndarray, ids_v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (iu, iv) of items present in both views, ordered by id."""
    common, iu, iv = np.intersect1d(ids_u, ids_v, assume_unique=True, return_indices=True)
    return iu, iv


def _same_scale_one_way(u: Tensor, ids_u, v: Tensor, ids_v, intra: bool) -> ContrastBatch:
    present = np.isin(ids_u, ids_v)
    rows = np.flatnonzero(present)
    a_ids = ids_u[rows]
    anchors = T.take_rows(u, rows)
    pos = a_ids[:, None] == ids_v[None, :]
    neg = ~pos
    candidates = v
    if intra:
        candidates = T.concat([v, u], axis=0)
        pos = np.concatenate([pos, np.zeros((rows.size, len(ids_u)), dtype=bool)], axis=1)
        neg = np.concatenate([neg, a_ids[:, None] != ids_u[None, :]], axis=1)
    return ContrastBatch(anchors, candidates, pos, neg)


def sample_same_scale(u: Tensor, v: Tensor, ids_u=None, ids_v=None,
                      intra_view_negatives: bool = False) -> tuple[ContrastBatch, ContrastBatch]:
    """LL / GG batches for both anchor directions.

    ``ids_u``/``ids_v`` give the source index of every row (node ids for LL,
    graph ids for GG); rows whose counterpart is missing from the other view
    are not used as anchors.
    """
    ids_u = np.arange(u.shape[0]) if ids_u is None else np.asarray(ids_u)
    ids_v = np.arange(v.shape[0]) if ids_v is None else np.asarray(ids_v)
    if ids_u.shape != (u.shape[0],) or ids_v.shape != (v.shape[0],):
        raise ContrastError("alignment ids must have one entry per embedding row")
    if not np.intersect1d(ids_u, ids_v).size:
        raise ContrastError("the two views share no aligned items")
    return (_same_scale_one_way(u, ids_u, v, ids_v, intra_view_negatives),
            _same_scale_one_way(v, ids_v, u, ids_u, intra_view_negatives))


def sample_cross_scale(s: Tensor, h: Tensor, graph_ids, node_graph_id, branch: str = "dual",
                       h_corrupt: Tensor | None = None, corrupt_graph_id=None,
                       require_negatives: bool = True) -> ContrastBatch:
    """GL batch: graph embeddings ``s`` as anchors against node embeddings ``h``.

    Positives are the anchor graph's own nodes. Negatives are nodes of other
    graphs (dual branch only) plus the anchor graph's nodes in the corrupted
    embedding ``h_corrupt`` when given. Single-branch contrasting requires
    ``h_corrupt``.
    """
    graph_ids = np.asarray(graph_ids)
    node_graph_id = np.zeros(h.shape[0], np.int64) if node_graph_id is None else np.asarray(node_graph_id)
    if graph_ids.shape != (s.shape[0],) or node_graph_id.shape != (h.shape[0],):
        raise ContrastError("graph ids must have one entry per embedding row")
    if branch == "single" and h_corrupt is None:
        raise ContrastError("single-branch GL needs corrupted node embeddings for negatives")
    pos = graph_ids[:, None] == node_graph_id[None, :]
    neg = ~pos if branch == "dual" else np.zeros_like(pos)
    candidates = h
    if h_corrupt is not None:
        cg = node_graph_id if corrupt_graph_id is None else np.asarray(corrupt_graph_id)
        candidates = T.concat([h, h_corrupt], axis=0)
        pos = np.concatenate([pos, np.zeros((s.shape[0], h_corrupt.shape[0]), bool)], axis=1)
        neg = np.concatenate([neg, graph_ids[:, None] == cg[None, :]], axis=1)
    keep = pos.any(axis=1)
    if not keep.any():
        raise ContrastError("no graph anchor has nodes in the other view")
    rows = np.flatnonzero(keep)
    batch = ContrastBatch(T.take_rows(s, rows) if rows.size < s.shape[0] else s, candidates, pos[rows], neg[rows])
    if require_negatives and not batch.has_negatives():
        raise ContrastError("a graph anchor has no negatives; a single graph in dual-branch mode "
                            "needs corruption or a negative-free objective")
    return batch


def corrupt_shuffle(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rows permuted by a uniformly drawn non-identity permutation."""
    n = x.shape[0]
    if n < 2:
        raise ContrastError("corruption by shuffling needs at least two rows")
    while True:
        perm = rng.permutation(n)
        if np.any(perm != np.arange(n)):
            return x[perm]
