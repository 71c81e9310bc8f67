"""Layers, encoders and readout built on the tensor ops."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..graph import SYM_NORM_SELFLOOP, Graph, derive
from . import tensor as T
from .tensor import Tensor, parameter


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                out.update(value.named_buffers(key + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{key}.{i}."))
            elif name.startswith("running_"):
                out[key] = value
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k in buffers:
            owner, attr = self._locate(k)
            setattr(owner, attr, np.array(state[k], dtype=np.float64))

    def _locate(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        for p in parts[:-1]:
            obj = obj[int(p)] if isinstance(obj, list) else getattr(obj, p)
        return obj, parts[-1]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def frozen_copy(self) -> "Module":
        """Deep copy whose parameters take no gradient (for EMA targets)."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.requires_grad = False
        return clone

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(glorot(rng, in_dim, out_dim))
        self.bias = parameter(np.zeros((1, out_dim))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class BatchNorm(Module):
    """Batch statistics while training; running averages (momentum 0.9) in eval mode."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-7):
        self.gamma = parameter(np.ones((1, dim)))
        self.beta = parameter(np.zeros((1, dim)))
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            mean = x.data.mean(axis=0, keepdims=True)
            var = x.data.var(axis=0, keepdims=True)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            return T.batch_norm(x, self.gamma, self.beta, self.eps)
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * scale * self.gamma + self.beta


class Activation(Module):
    def __init__(self, kind: str, dim: int = 1):
        if kind not in ("relu", "prelu"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.slope = parameter(np.full((1, dim), 0.25)) if kind == "prelu" else None

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x) if self.kind == "relu" else T.prelu(x, self.slope)


class MLP(Module):
    """Linear -> [BN] -> act -> Linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator,
                 batchnorm: bool = False, activation: str = "relu"):
        # batch norm's shift makes a bias here redundant
        self.lin1 = Linear(in_dim, hidden_dim, rng, bias=not batchnorm)
        self.bn = BatchNorm(hidden_dim) if batchnorm else None
        self.act = Activation(activation, hidden_dim)
        self.lin2 = Linear(hidden_dim, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.lin1(x)
        if self.bn is not None:
            h = self.bn(h)
        return self.lin2(self.act(h))


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "GCN"
    layers: int = 2
    hidden_dim: int = 256
    activation: str = "relu"
    use_batchnorm: bool = False

    def __post_init__(self):
        if self.kind not in ("GCN", "GIN"):
            raise ValueError(f"encoder kind must be GCN or GIN, got {self.kind!r}")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("encoder layers and hidden_dim must be positive")
        if self.activation not in ("relu", "prelu"):
            raise ValueError(f"activation must be relu or prelu, got {self.activation!r}")


def gcn_layer(h: Tensor, a_hat, w: Tensor, act=T.relu) -> Tensor:
    """act(A_hat H W) with A_hat the self-loop symmetric normalization."""
    return act(T.spmm(a_hat, h @ w))


def gin_layer(h: Tensor, adj, mlp: Module) -> Tensor:
    """mlp(H + sum over neighbours), i.e. GIN with epsilon fixed at 0."""
    return mlp(h + T.spmm(adj, h))


class GCNEncoder(Module):
    def __init__(self, in_dim: int, spec: EncoderSpec, rng: np.random.Generator):
        dims = [in_dim] + [spec.hidden_dim] * spec.layers
        self.lins = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.bns = [BatchNorm(spec.hidden_dim) for _ in range(spec.layers)] if spec.use_batchnorm else []
        self.acts = [Activation(spec.activation, spec.hidden_dim) for _ in range(spec.layers)]
        self.out_dim = spec.hidden_dim

    def forward(self, g: Graph) -> Tensor:
        a_hat = derive(g, SYM_NORM_SELFLOOP).matrix
        h = Tensor(g.features)
        for i, lin in enumerate(self.lins):
            h = T.spmm(a_hat, h @ lin.weight) + lin.bias
            if self.bns:
                h = self.bns[i](h)
            h = self.acts[i](h)
        return h


class GINEncoder(Module):
    def __init__(self, in_dim: int, spec: EncoderSpec, rng: np.random.Generator):
        dims = [in_dim] + [spec.hidden_dim] * spec.layers
        self.mlps = [MLP(a, b, b, rng, batchnorm=True, activation=spec.activation)
                     for a, b in zip(dims[:-1], dims[1:])]
        self.bns = [BatchNorm(spec.hidden_dim) for _ in range(spec.layers)] if spec.use_batchnorm else []
        self.acts = [Activation(spec.activation, spec.hidden_dim) for _ in range(spec.layers)]
        self.out_dim = spec.hidden_dim

    def forward(self, g: Graph) -> Tensor:
        h = Tensor(g.features)
        for i, mlp in enumerate(self.mlps):
            h = gin_layer(h, g.adj, mlp)
            if self.bns:
                h = self.bns[i](h)
            h = self.acts[i](h)
        return h


def make_encoder(in_dim: int, spec: EncoderSpec, rng: np.random.Generator) -> Module:
    return GCNEncoder(in_dim, spec, rng) if spec.kind == "GCN" else GINEncoder(in_dim, spec, rng)


@dataclass(frozen=True)
class ReadoutSpec:
    kind: str = "mean"

    def __post_init__(self):
        if self.kind not in ("mean", "sum"):
            raise ValueError(f"readout must be mean or sum, got {self.kind!r}")


def readout(h: Tensor, graph_id, kind: str = "mean", num_graphs: int | None = None) -> Tensor:
    """One row per graph id (ids 0..num_graphs-1, or the sorted ids present)."""
    graph_id = np.zeros(h.shape[0], dtype=np.int64) if graph_id is None else np.asarray(graph_id)
    if graph_id.shape != (h.shape[0],):
        raise T.ShapeError(f"graph_id length {graph_id.shape} does not cover {h.shape[0]} rows")
    if num_graphs is None:
        _, seg = np.unique(graph_id, return_inverse=True)
        num_graphs = int(seg.max()) + 1 if seg.size else 0
    else:
        seg = graph_id
    counts = np.bincount(seg, minlength=num_graphs)
    if np.any(counts == 0):
        raise ValueError(f"readout: graph ids {np.flatnonzero(counts == 0).tolist()} have no nodes")
    pooled = T.segment_sum(h, seg, num_graphs)
    if kind == "sum":
        return pooled
    if kind == "mean":
        return pooled * (1.0 / counts[:, None])
    raise ValueError(f"unknown readout {kind!r}")
