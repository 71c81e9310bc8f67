"""Trial orchestration: views, encoder, contrast batch, miner, loss, optimizer, probe, artifacts."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import mining
from .augment import apply
from .config import ExperimentConfig, config_from_dict, override, validate_config
from .contrast import ContrastBatch, corrupt_shuffle, sample_cross_scale, sample_same_scale
from .evaluation import EarlyStopper, EvalReport, linear_probe
from .graph import Graph, batch_graphs, gen_graph_dataset, gen_sbm, graph_labels, load_graph, make_splits
from .nn import MLP, Adam, make_encoder, readout, save_checkpoint
from .nn import tensor as T
from .nn.layers import EncoderSpec, Module
from .nn.tensor import Tensor
from .objectives import (
    BootstrapNetworks,
    Critic,
    barlow_twins,
    bl_loss,
    infonce,
    jsd,
    sp_jsd,
    triplet,
    vicreg,
)

STREAMS = ("aug1", "aug2", "init", "probe", "corrupt", "miner")


class TrialError(RuntimeError):
    def __init__(self, epoch: int | None, stage: str, cause: Exception):
        where = "setup" if epoch is None else f"epoch {epoch}"
        super().__init__(f"{where}, {stage}: {type(cause).__name__}: {cause}")
        self.epoch = epoch
        self.stage = stage
        self.cause = cause


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, name); names never share state."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# --
# datasets

@dataclass(frozen=True)
class Dataset:
    graph: Graph
    labels: np.ndarray
    multi_graph: bool


def load_dataset(config: ExperimentConfig) -> Dataset:
    d = config.dataset
    if d.kind == "sbm":
        g = gen_sbm(d.n_per_block, d.n_blocks, d.p_in, d.p_out, d.feature_dim, d.noise_sigma, d.seed)
        return Dataset(g, g.labels, False)
    if d.kind == "graphs":
        graphs = gen_graph_dataset(d.n_graphs, d.classes, (d.size_min, d.size_max), d.seed)
        return Dataset(batch_graphs(graphs), graph_labels(graphs), True)
    loaded = load_graph(d.path)
    if isinstance(loaded, list):
        if any(g.labels is None for g in loaded):
            raise ValueError(f"{d.path}: graph-level datasets need labels on every graph")
        return Dataset(batch_graphs(loaded), graph_labels(loaded), True)
    if loaded.labels is None:
        raise ValueError(f"{d.path}: node-level datasets need node labels")
    return Dataset(loaded, loaded.labels, False)


# --
# model

class Model:
    """Encoder plus the heads the configured objective needs."""

    def __init__(self, config: ExperimentConfig, in_dim: int, rng: np.random.Generator):
        obj = config.objective_spec()
        self.kind = obj.kind
        spec = config.encoder_spec()
        if obj.kind == "BL" and obj.bn_flags.get("encoder", False) and not spec.use_batchnorm:
            spec = EncoderSpec(spec.kind, spec.layers, spec.hidden_dim, spec.activation, True)
        self.encoder = make_encoder(in_dim, spec, rng)
        d = spec.hidden_dim
        self.nets = None
        self.critic = Critic(None)
        if obj.kind == "BL":
            projector = MLP(d, d, d, rng, batchnorm=obj.bn_flags.get("projector", False))
            predictor = MLP(d, d, d, rng, batchnorm=obj.bn_flags.get("predictor", False))
            self.nets = BootstrapNetworks(self.encoder, projector, predictor, obj.ema_decay)
        elif obj.kind != "TM":
            self.critic = Critic(MLP(d, d, d, rng))

    def parameters(self) -> list[Tensor]:
        if self.nets is not None:
            return self.nets.online_parameters()
        extra = self.critic.projector.parameters() if self.critic.projector is not None else []
        return self.encoder.parameters() + extra

    def modules(self) -> list[Module]:
        mods = [self.encoder]
        if self.nets is not None:
            mods += [self.nets.projector, self.nets.predictor, self.nets.target_encoder, self.nets.target_projector]
        elif self.critic.projector is not None:
            mods.append(self.critic.projector)
        return mods

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, m in enumerate(self.modules()):
            state.update({f"m{i}.{k}": v for k, v in m.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, m in enumerate(self.modules()):
            prefix = f"m{i}."
            m.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


# --
# one epoch

@dataclass
class Context:
    config: ExperimentConfig
    model: Model
    rngs: dict
    multi_graph: bool
    stage: str = "setup"


def _pool(h: Tensor, g: Graph, kind: str) -> tuple[Tensor, np.ndarray]:
    gid = np.zeros(g.num_nodes, np.int64) if g.graph_id is None else g.graph_id
    return readout(h, gid, kind), np.unique(gid)


def _corrupted(ctx: Context, g: Graph, encoder: Module) -> Tensor:
    return encoder(g.replace(features=corrupt_shuffle(g.features, ctx.rngs["corrupt"])))


def _batches(ctx: Context, v1: Graph, v2: Graph, encoder_a: Module, encoder_b: Module) -> list[ContrastBatch]:
    """Contrast batches for both anchor directions; ``encoder_b`` embeds candidates."""
    m = ctx.config.mode_spec()
    ro = ctx.config.readout.kind
    ctx.stage = "encode"
    h1a, h2a = encoder_a(v1), encoder_a(v2)
    h1b, h2b = (h1a, h2a) if encoder_b is encoder_a else (encoder_b(v1), encoder_b(v2))
    ctx.stage = "contrast"
    if m.mode == "LL":
        b12 = sample_same_scale(h1a, h2b, v1.node_ids, v2.node_ids, m.intra_view_negatives)[0]
        b21 = sample_same_scale(h2a, h1b, v2.node_ids, v1.node_ids, m.intra_view_negatives)[0]
        return [b12, b21]
    if m.mode == "GG":
        s1a, ids1 = _pool(h1a, v1, ro)
        s2a, ids2 = _pool(h2a, v2, ro)
        s1b, _ = (s1a, ids1) if encoder_b is encoder_a else _pool(h1b, v1, ro)
        s2b, _ = (s2a, ids2) if encoder_b is encoder_a else _pool(h2b, v2, ro)
        b12 = sample_same_scale(s1a, s2b, ids1, ids2, m.intra_view_negatives)[0]
        b21 = sample_same_scale(s2a, s1b, ids2, ids1, m.intra_view_negatives)[0]
        return [b12, b21]
    # GL
    if m.branch == "single":
        s, ids = _pool(h1a, v1, ro)
        hc = _corrupted(ctx, v1, encoder_b)
        return [sample_cross_scale(s, h1b, ids, v1.graph_id, "single", hc, v1.graph_id)]
    out = []
    for ha, vb, hb, va in ((h1a, v2, h2b, v1), (h2a, v1, h1b, v2)):
        s, ids = _pool(ha, va, ro)
        hc = None if ctx.multi_graph else _corrupted(ctx, vb, encoder_b)
        out.append(sample_cross_scale(s, hb, ids, vb.graph_id, "dual", hc, vb.graph_id))
    return out


def _mine(ctx: Context, b: ContrastBatch) -> ContrastBatch:
    ms = ctx.config.miner_spec()
    ctx.stage = "mine"
    if ms.kind == "HNM":
        sim = ctx.model.critic.similarity(b.anchors.detach(), b.candidates.detach()).data
        return mining.hnm_augment(b, ms.S, ms.K, ctx.rngs["miner"], sim=sim)
    if ms.kind == "CNS":
        return mining.cns_filter(b, ms.l, ms.u)
    return b


def _negative_loss(ctx: Context, b: ContrastBatch) -> Tensor:
    obj, ms = ctx.config.objective_spec(), ctx.config.miner_spec()
    critic = ctx.model.critic
    if obj.kind == "InfoNCE":
        if ms.kind == "DCL":
            return mining.debiased_infonce(b, critic, obj.tau, ms.tau_plus)
        if ms.kind == "HBNM":
            return mining.hardness_infonce(b, critic, obj.tau, ms.tau_plus, ms.beta)
        return infonce(b, critic, obj.tau)
    if obj.kind == "JSD":
        return jsd(b, critic)
    if obj.kind == "SPJSD":
        return sp_jsd(b, critic)
    return triplet(b, obj.epsilon)


def _aligned_pair(b: ContrastBatch) -> tuple[Tensor, Tensor]:
    rows, cols = np.nonzero(b.pos_mask)
    return T.take_rows(b.anchors, rows), T.take_rows(b.candidates, cols)


def epoch_loss(ctx: Context, v1: Graph, v2: Graph) -> Tensor:
    """Loss for one pair of views; ``ctx.stage`` names the step in progress."""
    model = ctx.model
    obj = ctx.config.objective_spec()
    if obj.kind == "BL":
        batches = _batches(ctx, v1, v2, model.encoder, model.nets.target_encoder)
        ctx.stage = "loss"
        return bl_loss(model.nets, batches[0], batches[1])
    batches = _batches(ctx, v1, v2, model.encoder, model.encoder)
    if obj.kind in ("BT", "VICReg"):
        z1, z2 = _aligned_pair(batches[0])
        ctx.stage = "loss"
        z1, z2 = model.critic.project(z1), model.critic.project(z2)
        if obj.kind == "BT":
            return barlow_twins(z1, z2, obj.lam)
        lam = 25.0 if obj.lam is None else obj.lam
        return vicreg(z1, z2, lam, obj.mu, obj.gamma)
    losses = []
    for b in batches:
        b = _mine(ctx, b)
        ctx.stage = "loss"
        losses.append(_negative_loss(ctx, b))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


# --
# trial

@dataclass
class TrialResult:
    loss_curve: list[float]
    best_epoch: int
    report: EvalReport
    embeddings: np.ndarray
    mean_edges_in_views: float
    run_dir: Path | None = None
    config: dict = field(default_factory=dict)


def run_root() -> Path:
    return Path(os.environ.get("GCL_RUN_DIR", "runs"))


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha1(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def embed(model: Model, dataset: Dataset, readout_kind: str) -> np.ndarray:
    model.encoder.eval()
    h = model.encoder(dataset.graph)
    if dataset.multi_graph:
        h, _ = _pool(h, dataset.graph, readout_kind)
    model.encoder.train()
    return h.data.copy()


def run_trial(config: ExperimentConfig, run_dir: Path | str | None = None, write: bool = True,
              dataset: Dataset | None = None) -> TrialResult:
    """Train per the config, probe the best checkpoint, and write artifacts when ``write``."""
    try:
        dataset = dataset or load_dataset(config)
    except Exception as e:
        raise TrialError(None, "dataset", e) from e
    validate_config(config, dataset.multi_graph)
    seed = config.optimizer.seed
    rngs = {name: substream(seed, name) for name in STREAMS}
    g = dataset.graph
    try:
        model = Model(config, g.features.shape[1], rngs["init"])
    except Exception as e:
        raise TrialError(None, "model", e) from e
    ctx = Context(config, model, rngs, dataset.multi_graph)
    aug1, aug2 = config.aug(1), config.aug(2)
    opt = Adam(model.parameters(), config.optimizer.lr, config.optimizer.weight_decay)
    stopper = EarlyStopper(config.optimizer.patience)
    curve: list[float] = []
    edges: list[float] = []
    best_state = model.state_dict()
    for epoch in range(config.optimizer.epochs):
        # the epoch's loss is measured with the parameters from before its update
        before = model.state_dict()
        try:
            ctx.stage = "augment"
            v1, v2 = apply(aug1, g, rngs["aug1"]), apply(aug2, g, rngs["aug2"])
            edges.append(0.5 * (v1.num_edges + v2.num_edges))
            loss = epoch_loss(ctx, v1, v2)
            ctx.stage = "backward"
            opt.zero_grad()
            T.backward(loss)
            ctx.stage = "step"
            opt.step()
            if model.nets is not None:
                model.nets.update_target()
        except Exception as e:
            raise TrialError(epoch, ctx.stage, e) from e
        value = loss.item()
        curve.append(value)
        halt = stopper.update(value)
        if stopper.improved:
            best_state = before
        if halt:
            break
    model.load_state_dict(best_state)
    try:
        emb = embed(model, dataset, config.readout.kind)
    except Exception as e:
        raise TrialError(None, "embed", e) from e
    e = config.eval
    split_seed = e.split_seed if e.split_seed is not None else int(rngs["probe"].integers(2**31 - 1))
    try:
        splits = make_splits(dataset.labels, e.n_splits, split_seed, e.train_frac, e.valid_frac)
        report = linear_probe(emb, dataset.labels, splits, config.probe_params())
    except Exception as e_:
        raise TrialError(None, "probe", e_) from e_
    if not edges:
        edges = [0.5 * (apply(aug1, g, rngs["aug1"]).num_edges + apply(aug2, g, rngs["aug2"]).num_edges)]
    result = TrialResult(curve, stopper.best_index, report, emb, float(np.mean(edges)), None, config.to_dict())
    if write:
        result.run_dir = write_artifacts(result, model, config, run_dir)
    return result


def write_artifacts(result: TrialResult, model: Model, config: ExperimentConfig, run_dir=None) -> Path:
    run_dir = Path(run_dir) if run_dir is not None else run_root() / f"trial-{config_digest(config)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (run_dir / "loss_curve.json").write_text(json.dumps(
        {"loss": result.loss_curve, "best_epoch": result.best_epoch,
         "mean_edges_in_views": result.mean_edges_in_views}, indent=1))
    save_checkpoint(run_dir / "checkpoint", model.state_dict())
    np.save(run_dir / "embeddings.npy", result.embeddings)
    (run_dir / "report.json").write_text(result.report.to_json())
    return run_dir


# --
# sweeps

@dataclass
class SweepRow:
    value: Any
    mean: float
    std: float
    mean_edges_in_views: float
    error: str = ""


def _sweep_one(args) -> SweepRow:
    base_doc, axis, value, run_dir = args
    try:
        cfg = override(config_from_dict(base_doc), axis, value)
        res = run_trial(cfg, run_dir=run_dir, write=run_dir is not None)
        return SweepRow(value, res.report.mean, res.report.std, res.mean_edges_in_views)
    except Exception as e:
        return SweepRow(value, float("nan"), float("nan"), float("nan"), f"{type(e).__name__}: {e}")


def sweep(base: ExperimentConfig, axis: str, values: Sequence[Any], workers: int = 1,
          out_dir: Path | str | None = None) -> list[SweepRow]:
    """One trial per value with the base seed; failed trials are recorded and the sweep continues."""
    if not values:
        raise ValueError("sweep needs at least one value")
    override(base, axis, values[0])  # rejects an unknown axis before any trial runs
    doc = base.to_dict()
    jobs = [(doc, axis, v, None if out_dir is None else str(Path(out_dir) / f"value-{i}"))
            for i, v in enumerate(values)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(sweep_csv(rows))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "mean", "std", "mean_edges_in_views", "error"])
    for r in rows:
        w.writerow([json.dumps(r.value), repr(r.mean), repr(r.std), repr(r.mean_edges_in_views), r.error])
    return buf.getvalue()
