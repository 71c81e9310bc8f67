"""Attributed graph container, derived matrices, splits and synthetic datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be parsed."""


class GraphValidationError(ValueError):
    """Raised when a graph violates a structural invariant."""

    def __init__(self, rule: str, detail: str):
        super().__init__(f"[{rule}] {detail}")
        self.rule = rule


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable attributed graph.

    ``adj`` is an N x N CSR matrix with one stored entry per arc; undirected
    graphs store both directions. ``node_ids`` maps each node back to its index
    in the graph the view was derived from (identity for original graphs).
    """

    adj: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray | None = None
    graph_id: np.ndarray | None = None
    directed: bool = False
    node_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.node_ids is None:
            object.__setattr__(self, "node_ids", np.arange(self.num_nodes))
        for arr in (self.adj.data, self.adj.indices, self.adj.indptr, self.features,
                    self.labels, self.graph_id, self.node_ids):
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.adj.shape[0]

    @property
    def num_arcs(self) -> int:
        return self.adj.nnz

    @property
    def num_edges(self) -> int:
        """Undirected edge count (arcs / 2 for undirected graphs)."""
        return self.adj.nnz if self.directed else self.adj.nnz // 2

    @property
    def num_graphs(self) -> int:
        if self.graph_id is None:
            return 1
        return int(np.unique(self.graph_id).size)

    def arcs(self) -> np.ndarray:
        coo = self.adj.tocoo()
        return np.stack([coo.row, coo.col], axis=1)

    def edge_list(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (u < v) and their weights."""
        coo = sp.triu(self.adj, k=1).tocoo() if not self.directed else self.adj.tocoo()
        return np.stack([coo.row, coo.col], axis=1), coo.data.copy()

    def degrees(self) -> np.ndarray:
        return np.diff(self.adj.indptr)

    def replace(self, **changes) -> "Graph":
        kw = dict(adj=self.adj, features=self.features, labels=self.labels,
                  graph_id=self.graph_id, directed=self.directed, node_ids=self.node_ids)
        kw.update(changes)
        return Graph(**kw)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return graphs_equal(self, other)

    __hash__ = None


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


def graphs_equal(a: Graph, b: Graph) -> bool:
    return (
        a.directed == b.directed
        and a.adj.shape == b.adj.shape
        and np.array_equal(a.adj.indptr, b.adj.indptr)
        and np.array_equal(a.adj.indices, b.adj.indices)
        and np.array_equal(a.adj.data, b.adj.data)
        and a.features.shape == b.features.shape
        and np.array_equal(a.features, b.features)
        and _opt_equal(a.labels, b.labels)
        and _opt_equal(a.graph_id, b.graph_id)
        and np.array_equal(a.node_ids, b.node_ids)
    )


def build_adjacency(num_nodes: int, rows, cols, weights=None, *, symmetrize: bool = True) -> sp.csr_matrix:
    """Canonical CSR adjacency from arc lists.

    Self-loops are discarded and duplicate arcs collapse to the maximum weight.
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if weights is None:
        weights = np.ones(rows.size)
    weights = np.asarray(weights, dtype=np.float64).ravel()
    keep = rows != cols
    rows, cols, weights = rows[keep], cols[keep], weights[keep]
    if symmetrize:
        rows, cols = np.concatenate([rows, cols]), np.concatenate([cols, rows])
        weights = np.concatenate([weights, weights])
    if rows.size:
        # collapse duplicates by max weight: sort so the largest comes last per key
        order = np.lexsort((weights, cols, rows))
        rows, cols, weights = rows[order], cols[order], weights[order]
        last = np.ones(rows.size, dtype=bool)
        last[:-1] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        rows, cols, weights = rows[last], cols[last], weights[last]
    adj = sp.csr_matrix((weights, (rows, cols)), shape=(num_nodes, num_nodes))
    adj.sort_indices()
    return adj


def from_edges(num_nodes: int, edges, features=None, *, weights=None, labels=None,
               graph_id=None, directed: bool = False) -> Graph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise GraphValidationError("index-range", f"edge index outside [0, {num_nodes})")
    if features is None:
        features = np.ones((num_nodes, 1))
    adj = build_adjacency(num_nodes, edges[:, 0], edges[:, 1], weights, symmetrize=not directed)
    g = Graph(
        adj=adj,
        features=np.asarray(features, dtype=np.float64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        graph_id=None if graph_id is None else np.asarray(graph_id, dtype=np.int64),
        directed=directed,
    )
    validate(g)
    return g


def validate(g: Graph) -> Graph:
    """Check every structural invariant; raise GraphValidationError naming the rule."""
    n = g.num_nodes
    adj = g.adj
    if not sp.isspmatrix_csr(adj) and not isinstance(adj, sp.csr_array):
        raise GraphValidationError("csr", "adjacency must be CSR")
    if adj.shape != (n, n):
        raise GraphValidationError("csr", f"adjacency shape {adj.shape} is not square")
    if adj.indptr.size != n + 1 or adj.indptr[0] != 0 or np.any(np.diff(adj.indptr) < 0):
        raise GraphValidationError("csr", "malformed indptr")
    if adj.nnz and (adj.indices.min() < 0 or adj.indices.max() >= n):
        raise GraphValidationError("index-range", "column index out of range")
    rows = np.repeat(np.arange(n), np.diff(adj.indptr))
    if adj.nnz > 1:
        same_row = rows[1:] == rows[:-1]
        if np.any(same_row & (adj.indices[1:] <= adj.indices[:-1])):
            raise GraphValidationError("csr-sorted", "column indices unsorted or duplicated within a row")
    if np.any(rows == adj.indices):
        raise GraphValidationError("no-self-loops", "stored edges contain a self-loop")
    if not np.all(np.isfinite(adj.data)) or np.any(adj.data < 0):
        raise GraphValidationError("weights", "edge weights must be finite and >= 0")
    if g.features.ndim != 2 or g.features.shape[0] != n:
        raise GraphValidationError("features", f"feature matrix shape {g.features.shape} does not match {n} nodes")
    if not np.all(np.isfinite(g.features)):
        raise GraphValidationError("features", "features must be finite")
    for name in ("labels", "graph_id", "node_ids"):
        arr = getattr(g, name)
        if arr is not None and arr.shape != (n,):
            raise GraphValidationError(name, f"{name} length {arr.shape} does not match {n} nodes")
    if not g.directed:
        diff = adj - adj.T
        if diff.nnz and np.abs(diff.data).max() > 0:
            raise GraphValidationError("symmetry", "undirected graph has an unmatched or unequal arc")
    if g.graph_id is not None and adj.nnz:
        if np.any(g.graph_id[rows] != g.graph_id[adj.indices]):
            raise GraphValidationError("graph-id", "arc connects nodes of different graphs")
    return g


# --
# Persistence

def _graph_to_dict(g: Graph) -> dict:
    if g.directed:
        coo = g.adj.tocoo()
        pairs = zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())
    else:
        (uv, w) = g.edge_list()
        pairs = zip(uv[:, 0].tolist(), uv[:, 1].tolist(), w.tolist())
    edges = [[u, v] if w == 1.0 else [u, v, w] for u, v, w in pairs]
    return {
        "num_nodes": g.num_nodes,
        "directed": g.directed,
        "edges": edges,
        "features": g.features.tolist(),
        "labels": None if g.labels is None else g.labels.tolist(),
        "graph_id": None if g.graph_id is None else g.graph_id.tolist(),
    }


def _graph_from_dict(doc: dict, where: str = "") -> Graph:
    try:
        n = doc["num_nodes"]
    except (KeyError, TypeError):
        raise GraphFormatError(f"{where}missing field 'num_nodes'") from None
    if not isinstance(n, int) or n < 0:
        raise GraphFormatError(f"{where}field 'num_nodes' must be a non-negative integer")
    directed = doc.get("directed", False)
    if not isinstance(directed, bool):
        raise GraphFormatError(f"{where}field 'directed' must be boolean")
    rows, cols, weights = [], [], []
    for i, e in enumerate(doc.get("edges", [])):
        if not isinstance(e, list) or len(e) not in (2, 3):
            raise GraphFormatError(f"{where}edges[{i}]: expected [u, v] or [u, v, w], got {e!r}")
        if not all(isinstance(x, int) for x in e[:2]):
            raise GraphFormatError(f"{where}edges[{i}]: node indices must be integers")
        if not 0 <= e[0] < n or not 0 <= e[1] < n:
            raise GraphValidationError("index-range", f"{where}edges[{i}] = {e!r} outside [0, {n})")
        rows.append(e[0])
        cols.append(e[1])
        weights.append(float(e[2]) if len(e) == 3 else 1.0)
    feats = doc.get("features")
    if feats is None:
        raise GraphFormatError(f"{where}missing field 'features'")
    try:
        x = np.asarray(feats, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise GraphFormatError(f"{where}field 'features': {exc}") from None
    if n == 0:
        x = x.reshape(0, x.shape[1] if x.ndim == 2 else 0)
    labels = doc.get("labels")
    graph_id = doc.get("graph_id")
    g = Graph(
        adj=build_adjacency(n, rows, cols, weights, symmetrize=not directed),
        features=x,
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        graph_id=None if graph_id is None else np.asarray(graph_id, dtype=np.int64),
        directed=directed,
    )
    return validate(g)


def save_graph(path, graph: Graph | Sequence[Graph]) -> None:
    if isinstance(graph, Graph):
        doc = _graph_to_dict(graph)
    else:
        doc = {"graphs": [_graph_to_dict(g) for g in graph]}
    Path(path).write_text(json.dumps(doc))


def load_graph(path) -> Graph | list[Graph]:
    """Load a graph (or a multi-graph dataset) from the JSON container format."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise GraphFormatError(f"{path}: top level must be an object")
    if "graphs" in doc:
        return [_graph_from_dict(d, where=f"graphs[{i}]: ") for i, d in enumerate(doc["graphs"])]
    return _graph_from_dict(doc)


def batch_graphs(graphs: Sequence[Graph]) -> Graph:
    """Disjoint union of graphs; ``graph_id`` records membership, labels are per node."""
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    adj = sp.block_diag([g.adj for g in graphs], format="csr")
    adj.sort_indices()
    feats = np.concatenate([g.features for g in graphs], axis=0)
    gid = np.repeat(np.arange(len(graphs)), np.diff(offsets))
    return Graph(adj=adj, features=feats, labels=None, graph_id=gid, directed=False)


# --
# Derived matrices

SYM_NORM_SELFLOOP = "sym_norm_selfloop"
RW_TRANSITION = "rw_transition"


@dataclass(frozen=True)
class DerivedMatrix:
    kind: str
    matrix: sp.csr_matrix


def derive(g: Graph, kind: str) -> DerivedMatrix:
    n = g.num_nodes
    if kind == SYM_NORM_SELFLOOP:
        a = g.adj + sp.eye(n, format="csr")
        d = np.asarray(a.sum(axis=1)).ravel()
        dinv = sp.diags(1.0 / np.sqrt(d))
        m = (dinv @ a @ dinv).tocsr()
    elif kind == RW_TRANSITION:
        d = np.asarray(g.adj.sum(axis=1)).ravel()
        isolated = d == 0
        a = g.adj + sp.diags(isolated.astype(np.float64))
        d = np.where(isolated, 1.0, d)
        m = (sp.diags(1.0 / d) @ a).tocsr()
    else:
        raise ValueError(f"unknown matrix kind {kind!r}; expected {SYM_NORM_SELFLOOP!r} or {RW_TRANSITION!r}")
    m.sort_indices()
    return DerivedMatrix(kind, m)


# --
# Splits

@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    valid_idx: np.ndarray
    test_idx: np.ndarray
    seed: int


def make_splits(labels, n_splits: int = 10, seed: int = 0,
                train_frac: float = 0.1, valid_frac: float = 0.1) -> list[Split]:
    """Random train/valid/test splits over labeled items, one fresh shuffle per split."""
    labels = np.asarray(labels)
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    items = np.flatnonzero(labels >= 0) if labels.dtype.kind in "iu" else np.arange(labels.size)
    if items.size < 10:
        raise ValueError(f"need at least 10 labeled items, got {items.size}")
    n = items.size
    n_train = int(round(train_frac * n))
    n_valid = int(round(valid_frac * n))
    out = []
    for i in range(n_splits):
        perm = np.random.default_rng(seed + i).permutation(items)
        out.append(Split(
            train_idx=np.sort(perm[:n_train]),
            valid_idx=np.sort(perm[n_train:n_train + n_valid]),
            test_idx=np.sort(perm[n_train + n_valid:]),
            seed=seed + i,
        ))
    return out


# --
# Synthetic datasets

def gen_sbm(n_per_block: int, n_blocks: int, p_in: float, p_out: float,
            feature_dim: int | None = None, noise_sigma: float = 0.0, seed: int = 0) -> Graph:
    """Stochastic block model with one-hot block features plus Gaussian noise."""
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("p_in and p_out must lie in [0, 1]")
    feature_dim = n_blocks if feature_dim is None else feature_dim
    if feature_dim < n_blocks:
        raise ValueError("feature_dim must be >= n_blocks")
    rng = np.random.default_rng(seed)
    n = n_per_block * n_blocks
    labels = np.repeat(np.arange(n_blocks), n_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    x = np.zeros((n, feature_dim))
    x[np.arange(n), labels] = 1.0
    x += noise_sigma * rng.standard_normal(x.shape)
    return from_edges(n, np.stack([iu[keep], ju[keep]], axis=1), x, labels=labels)


GRAPH_CLASSES = ("cycle", "tree", "clique")


def _family_edges(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "cycle":
        u = np.arange(size)
        return np.stack([u, (u + 1) % size], axis=1)
    if kind == "clique":
        iu, ju = np.triu_indices(size, k=1)
        return np.stack([iu, ju], axis=1)
    if kind == "tree":
        # random recursive tree: node i attaches to a uniform earlier node
        parents = [int(rng.integers(0, i)) for i in range(1, size)]
        return np.array([[p, i] for i, p in zip(range(1, size), parents)])
    raise ValueError(f"unknown graph class {kind!r}; expected one of {GRAPH_CLASSES}")


def degree_features(num_nodes: int, edges: np.ndarray) -> np.ndarray:
    deg = np.bincount(edges.ravel(), minlength=num_nodes).astype(np.float64)
    return (deg / max(num_nodes - 1, 1))[:, None]


def gen_graph_dataset(n_graphs: int, classes: Iterable[str] = GRAPH_CLASSES,
                      size_range: tuple[int, int] = (6, 12), seed: int = 0) -> list[Graph]:
    """Labeled collection of structural families, one graph label per graph.

    Node features are the degree divided by (n - 1). Each returned graph carries
    its class id in ``labels`` (one entry per node, all equal).
    """
    classes = list(classes)
    lo, hi = size_range
    if lo < 3 or hi < lo:
        raise ValueError("size_range must satisfy 3 <= min <= max")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_graphs):
        c = i % len(classes)
        size = int(rng.integers(lo, hi + 1))
        edges = _family_edges(classes[c], size, rng)
        out.append(from_edges(size, edges, degree_features(size, edges),
                              labels=np.full(size, c)))
    return out


def graph_labels(graphs: Sequence[Graph]) -> np.ndarray:
    return np.array([int(g.labels[0]) for g in graphs])
