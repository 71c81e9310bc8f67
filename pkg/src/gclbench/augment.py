"""Graph view generators and their composition.

Every augmentor is a pure function of ``(graph, params, rng)``: the input
graph is never modified and the same generator state yields the same view.
Views produced by node-removing schemes (ND, RWS) carry ``node_ids`` mapping
each surviving node to its index in the source graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

from .graph import RW_TRANSITION, Graph, build_adjacency, derive

SCHEMES = ("ER", "EA", "EF", "ND", "RWS", "PPR", "MDK", "FM", "FD", "Identity")

# enumerate candidate pairs explicitly below this many; rejection-sample above
_MAX_ENUMERATED_PAIRS = 4_000_000


class AugmentationError(ValueError):
    def __init__(self, scheme: str, detail: str):
        super().__init__(f"{scheme}: {detail}")
        self.scheme = scheme


@dataclass(frozen=True)
class Augmentor:
    """One augmentation scheme and its parameters.

    ``prob`` is the scheme's probability: removal (ER), addition (EA), flip
    (EF), node drop (ND), restart (RWS), mask (FM) or dropout (FD).
    """

    scheme: str
    prob: float = 0.2
    alpha: float = 0.15
    eps: float = 1e-4
    k_steps: int = 4
    walk_budget: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"{self.scheme}: prob must lie in [0, 1], got {self.prob}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"{self.scheme}: alpha must lie in (0, 1), got {self.alpha}")
        if self.eps < 0:
            raise ValueError(f"{self.scheme}: eps must be >= 0")
        if self.k_steps < 1:
            raise ValueError(f"{self.scheme}: k_steps must be >= 1")
        if self.walk_budget is not None and self.walk_budget < 1:
            raise ValueError(f"{self.scheme}: walk_budget must be >= 1")


@dataclass(frozen=True)
class Composite:
    """Ordered augmentors applied all in sequence, or k of them drawn at random."""

    children: tuple = field(default_factory=tuple)
    mode: str = "compose_all"
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ValueError("composite augmentor needs at least one child")
        if self.mode not in ("compose_all", "random_choice"):
            raise ValueError(f"unknown composite mode {self.mode!r}")
        if self.mode == "random_choice" and not 1 <= self.k <= len(self.children):
            raise ValueError(f"random_choice k={self.k} must be in [1, {len(self.children)}]")


AugmentorLike = Union[Augmentor, Composite]


def apply(aug: AugmentorLike, g: Graph, rng: np.random.Generator) -> Graph:
    """Produce one view of ``g``.

    Composites hand each child its own spawned generator, so a child's draws
    do not depend on the other children's parameters.
    """
    if isinstance(aug, Composite):
        if aug.mode == "compose_all":
            order = range(len(aug.children))
        else:
            order = rng.choice(len(aug.children), size=aug.k, replace=False)
        streams = rng.spawn(len(aug.children))
        for i in order:
            g = apply(aug.children[i], g, streams[i])
        return g
    s = aug.scheme
    if s == "Identity":
        return g
    if s == "ER":
        return edge_removing(g, aug.prob, rng)
    if s == "EA":
        return edge_adding(g, aug.prob, rng)
    if s == "EF":
        return edge_flipping(g, aug.prob, rng)
    if s == "ND":
        return node_dropping(g, aug.prob, rng)
    if s == "RWS":
        return rw_subgraph(g, aug.prob, aug.walk_budget, rng)
    if s == "PPR":
        return ppr_diffusion(g, aug.alpha, aug.eps)
    if s == "MDK":
        return mdk_diffusion(g, aug.k_steps, aug.eps)
    if s == "FM":
        return feature_masking(g, aug.prob, rng)
    if s == "FD":
        return feature_dropout(g, aug.prob, rng)
    raise AssertionError(s)


def _check_prob(scheme: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise AugmentationError(scheme, f"probability must lie in [0, 1], got {p}")


def _with_edges(g: Graph, uv: np.ndarray, w: np.ndarray) -> Graph:
    adj = build_adjacency(g.num_nodes, uv[:, 0], uv[:, 1], w, symmetrize=not g.directed)
    return g.replace(adj=adj)


# --
# Topology

def edge_removing(g: Graph, p_r: float, rng: np.random.Generator) -> Graph:
    """Drop each undirected edge independently with probability ``p_r``."""
    _check_prob("ER", p_r)
    uv, w = g.edge_list()
    keep = rng.random(len(w)) >= p_r
    return _with_edges(g, uv[keep], w[keep])


def _blocks(g: Graph) -> list[np.ndarray]:
    """Node groups that edges may join: the whole graph, or each member of a batch."""
    if g.graph_id is None:
        return [np.arange(g.num_nodes)]
    return [np.flatnonzero(g.graph_id == i) for i in np.unique(g.graph_id)]


def edge_adding(g: Graph, p_a: float, rng: np.random.Generator) -> Graph:
    """Add each absent unordered pair independently with probability ``p_a``.

    Sampled as a Binomial count followed by that many distinct absent pairs
    drawn uniformly. For multi-graph batches only pairs inside one graph count.
    """
    _check_prob("EA", p_a)
    if g.directed:
        raise AugmentationError("EA", "directed graphs are not supported")
    n = g.num_nodes
    blocks = _blocks(g)
    sizes = np.array([b.size * (b.size - 1) // 2 for b in blocks])
    total = int(sizes.sum())
    uv, w = g.edge_list()
    present = uv[:, 0] * n + uv[:, 1]
    n_absent = total - present.size
    k = int(rng.binomial(n_absent, p_a)) if n_absent > 0 else 0
    if k == 0:
        return g
    if total <= _MAX_ENUMERATED_PAIRS:
        keys = np.concatenate([
            b[i] * n + b[j] for b in blocks for i, j in [np.triu_indices(b.size, k=1)]
        ])
        absent = keys[~np.isin(keys, present)]
        chosen = rng.choice(absent, size=k, replace=False)
    else:
        taken = set(present.tolist())
        chosen = []
        while len(chosen) < k:
            b = blocks[rng.choice(len(blocks), p=sizes / total)]
            u, v = np.sort(rng.choice(b, size=2, replace=False))
            key = int(u) * n + int(v)
            if key not in taken:
                taken.add(key)
                chosen.append(key)
        chosen = np.array(chosen, dtype=np.int64)
    added = np.stack([chosen // n, chosen % n], axis=1)
    return _with_edges(g, np.concatenate([uv, added]), np.concatenate([w, np.ones(k)]))


def edge_flipping(g: Graph, p: float, rng: np.random.Generator) -> Graph:
    """Edge adding followed by edge removing, both at probability ``p``."""
    _check_prob("EF", p)
    return edge_removing(edge_adding(g, p, rng), p, rng)


def induced_subgraph(g: Graph, keep: np.ndarray) -> Graph:
    """Subgraph on the nodes flagged by ``keep`` (bool mask), relabeled densely."""
    idx = np.flatnonzero(keep)
    adj = g.adj[idx][:, idx].tocsr()
    adj.sort_indices()
    return Graph(
        adj=adj,
        features=g.features[idx],
        labels=None if g.labels is None else g.labels[idx],
        graph_id=None if g.graph_id is None else g.graph_id[idx],
        directed=g.directed,
        node_ids=g.node_ids[idx],
    )


def node_dropping(g: Graph, p_d: float, rng: np.random.Generator) -> Graph:
    _check_prob("ND", p_d)
    keep = rng.random(g.num_nodes) >= p_d
    if not keep.any():
        raise AugmentationError("ND", "every node was dropped; the view would be empty")
    return induced_subgraph(g, keep)


def survivor_map(view: Graph) -> dict[int, int]:
    """Source-graph node index -> view node index."""
    return {int(src): i for i, src in enumerate(view.node_ids)}


def random_walk_with_restart(adj: sp.csr_matrix, start: int, p_e: float, length: int,
                             rng: np.random.Generator) -> list[int]:
    """Walk of ``length`` positions (start included) returning to ``start`` w.p. ``p_e``."""
    indptr, indices = adj.indptr, adj.indices
    walk = [start]
    cur = start
    for _ in range(length - 1):
        deg = indptr[cur + 1] - indptr[cur]
        if rng.random() < p_e or deg == 0:
            cur = start
        else:
            cur = int(indices[indptr[cur] + rng.integers(deg)])
        walk.append(cur)
    return walk


def rw_subgraph(g: Graph, p_e: float, walk_budget: int | None, rng: np.random.Generator) -> Graph:
    """Subgraph induced by a random walk with restart from a uniform start node.

    The walk visits ``walk_budget`` positions (default: the node count). For
    multi-graph batches one walk runs inside every member graph.
    """
    _check_prob("RWS", p_e)
    if g.num_arcs == 0:
        raise AugmentationError("RWS", "graph has no edges to walk on")
    if walk_budget is not None and walk_budget < 1:
        raise AugmentationError("RWS", "walk_budget must be >= 1")
    keep = np.zeros(g.num_nodes, dtype=bool)
    for nodes in _blocks(g):
        budget = walk_budget if walk_budget is not None else nodes.size
        start = int(nodes[rng.integers(nodes.size)])
        keep[random_walk_with_restart(g.adj, start, p_e, budget, rng)] = True
    return induced_subgraph(g, keep)


def ppr_matrix(g: Graph, alpha: float, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Dense PPR diffusion sum_k alpha (1-alpha)^k T^k by fixed-point iteration."""
    if not 0.0 < alpha < 1.0:
        raise AugmentationError("PPR", f"alpha must lie in (0, 1), got {alpha}")
    t = derive(g, RW_TRANSITION).matrix
    n = g.num_nodes
    out = np.zeros((n, n))
    for nodes in _blocks(g):
        tb = t[nodes][:, nodes].tocsc()
        eye = np.eye(nodes.size)
        s = alpha * eye
        for _ in range(max_iter):
            nxt = alpha * eye + (1.0 - alpha) * np.asarray((tb.T @ s.T).T)
            delta = np.abs(nxt - s).max()
            s = nxt
            if delta < tol:
                break
        else:
            raise AugmentationError("PPR", f"no convergence within {max_iter} iterations")
        out[np.ix_(nodes, nodes)] = s
    return out


def mdk_matrix(g: Graph, k_steps: int) -> np.ndarray:
    """Dense Markov diffusion kernel (1/K) sum_{k=1..K} T^k."""
    if k_steps < 1:
        raise AugmentationError("MDK", "k_steps must be >= 1")
    t = derive(g, RW_TRANSITION).matrix
    n = g.num_nodes
    out = np.zeros((n, n))
    for nodes in _blocks(g):
        tb = t[nodes][:, nodes].toarray()
        power = np.eye(nodes.size)
        acc = np.zeros_like(power)
        for _ in range(k_steps):
            power = power @ tb
            acc += power
        out[np.ix_(nodes, nodes)] = acc / k_steps
    return out


def sparsify(g: Graph, s: np.ndarray, eps: float) -> Graph:
    """Threshold a dense diffusion matrix, drop its diagonal, symmetrize, wrap as a graph."""
    s = np.where(s >= eps, s, 0.0)
    np.fill_diagonal(s, 0.0)
    s = 0.5 * (s + s.T)
    rows, cols = np.nonzero(s)
    adj = sp.csr_matrix((s[rows, cols], (rows, cols)), shape=s.shape)
    adj.sort_indices()
    return g.replace(adj=adj, directed=False)


def ppr_diffusion(g: Graph, alpha: float = 0.15, eps_threshold: float = 1e-4) -> Graph:
    return sparsify(g, ppr_matrix(g, alpha), eps_threshold)


def mdk_diffusion(g: Graph, k_steps: int = 4, eps_threshold: float = 1e-4) -> Graph:
    return sparsify(g, mdk_matrix(g, k_steps), eps_threshold)


# --
# Features

def feature_masking(g: Graph, p_m: float, rng: np.random.Generator) -> Graph:
    """Zero whole feature dimensions, one shared mask for every node."""
    _check_prob("FM", p_m)
    mask = rng.random(g.features.shape[1]) >= p_m
    return g.replace(features=g.features * mask)


def feature_dropout(g: Graph, p_f: float, rng: np.random.Generator) -> Graph:
    """Zero individual feature entries independently."""
    _check_prob("FD", p_f)
    mask = rng.random(g.features.shape) >= p_f
    return g.replace(features=g.features * mask)


def augmentor_from_dict(doc) -> AugmentorLike:
    """Build from config JSON: ``{"scheme": "ER", "prob": 0.2}`` or a composite
    ``{"compose": [...]}`` / ``{"random_choice": k, "children": [...]}``."""
    if isinstance(doc, str):
        return Augmentor(doc)
    if isinstance(doc, list):
        return Composite(tuple(augmentor_from_dict(d) for d in doc))
    if "compose" in doc:
        return Composite(tuple(augmentor_from_dict(d) for d in doc["compose"]))
    if "random_choice" in doc:
        return Composite(tuple(augmentor_from_dict(d) for d in doc["children"]),
                         mode="random_choice", k=int(doc["random_choice"]))
    return Augmentor(**doc)


def augmentor_to_dict(aug: AugmentorLike) -> dict:
    if isinstance(aug, Composite):
        children = [augmentor_to_dict(c) for c in aug.children]
        if aug.mode == "compose_all":
            return {"compose": children}
        return {"random_choice": aug.k, "children": children}
    return {"scheme": aug.scheme, "prob": aug.prob, "alpha": aug.alpha, "eps": aug.eps,
            "k_steps": aug.k_steps, "walk_budget": aug.walk_budget}


def leaves(aug: AugmentorLike) -> Sequence[Augmentor]:
    if isinstance(aug, Composite):
        return [leaf for c in aug.children for leaf in leaves(c)]
    return [aug]
