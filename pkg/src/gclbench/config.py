"""Experiment configuration: schema, JSON persistence, colon-path overrides, compatibility rules."""
from __future__ import annotations

import copy
import json
import types
import typing
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any

from .augment import SCHEMES, Augmentor, augmentor_from_dict, augmentor_to_dict, leaves
from .contrast import ModeSpec
from .evaluation import L2_GRID, ProbeParams
from .graph import GRAPH_CLASSES
from .mining import MinerSpec
from .nn.layers import EncoderSpec, ReadoutSpec
from .objectives import NEGATIVE_FREE, OBJECTIVES, ObjectiveSpec


class ConfigError(ValueError):
    def __init__(self, rule: str, detail: str):
        super().__init__(f"[{rule}] {detail}")
        self.rule = rule


LOSS_NAMES = {k.lower(): k for k in OBJECTIVES} | {"sp-jsd": "SPJSD", "sp_jsd": "SPJSD", "triplet": "TM"}
SECTION_ALIASES = {"obj": "objective", "aug1": "augmentor1", "aug2": "augmentor2", "optim": "optimizer",
                   "enc": "encoder", "data": "dataset"}


@dataclass
class DatasetConfig:
    kind: str = "sbm"  # sbm | graphs | file
    path: str | None = None
    n_per_block: int = 100
    n_blocks: int = 2
    p_in: float = 0.1
    p_out: float = 0.01
    feature_dim: int | None = None
    noise_sigma: float = 1.0
    n_graphs: int = 150
    classes: list = field(default_factory=lambda: list(GRAPH_CLASSES))
    size_min: int = 6
    size_max: int = 12
    seed: int = 0


@dataclass
class EncoderConfig:
    kind: str = "GCN"
    layers: int = 2
    hidden_dim: int = 256
    activation: str = "relu"
    use_batchnorm: bool = False


@dataclass
class ReadoutConfig:
    kind: str = "mean"


@dataclass
class ModeConfig:
    mode: str = "LL"
    branch: str = "dual"
    intra_view_negatives: bool = False


@dataclass
class ObjectiveConfig:
    loss: str = "infonce"
    tau: float = 0.5
    epsilon: float = 1.0
    lam: float | None = None
    mu: float = 25.0
    gamma: float = 1.0
    ema_decay: float = 0.99
    bn_flags: dict = field(default_factory=lambda: {"encoder": True, "projector": False, "predictor": False})


@dataclass
class MinerConfig:
    kind: str = "none"
    tau_plus: float = 0.1
    beta: float = 1.0
    S: int = 2
    K: int = 8
    l: float = 25.0
    u: float = 75.0


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    weight_decay: float = 1e-5
    epochs: int = 500
    seed: int = 0
    patience: int = 50


@dataclass
class EvalConfig:
    n_splits: int = 10
    train_frac: float = 0.1
    valid_frac: float = 0.1
    split_seed: int | None = None  # None: drawn from the trial's probe stream
    l2_grid: list = field(default_factory=lambda: list(L2_GRID))
    steps: int = 500
    lr: float = 0.1


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    augmentor1: dict = field(default_factory=lambda: augmentor_to_dict(augmentor_from_dict({"scheme": "ER", "prob": 0.2})))
    augmentor2: dict = field(default_factory=lambda: augmentor_to_dict(augmentor_from_dict({"scheme": "ER", "prob": 0.2})))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # typed views used by the trainer

    def aug(self, which: int):
        return augmentor_from_dict(self.augmentor1 if which == 1 else self.augmentor2)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(**asdict(self.encoder))

    def readout_spec(self) -> ReadoutSpec:
        return ReadoutSpec(self.readout.kind)

    def mode_spec(self) -> ModeSpec:
        return ModeSpec(**asdict(self.mode))

    def objective_spec(self) -> ObjectiveSpec:
        o = self.objective
        return ObjectiveSpec(loss_kind(o.loss), o.tau, o.epsilon, o.lam, o.mu, o.gamma, o.ema_decay, dict(o.bn_flags))

    def miner_spec(self) -> MinerSpec:
        return MinerSpec(**asdict(self.miner))

    def probe_params(self) -> ProbeParams:
        return ProbeParams(self.eval.steps, self.eval.lr, tuple(self.eval.l2_grid))

    def to_dict(self) -> dict:
        return asdict(self)


def loss_kind(name: str) -> str:
    try:
        return LOSS_NAMES[str(name).lower()]
    except KeyError:
        raise ConfigError("objective", f"unknown loss {name!r}; valid: {sorted(LOSS_NAMES)}") from None


# --
# (de)serialization with type checks

def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value: Any, hint, where: str) -> Any:
    """Check ``value`` against a field annotation, allowing int -> float widening."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("type", f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError("type", f"{where}: expected an integer, got {value!r}")
        return int(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("type", f"{where}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("type", f"{where}: expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError("type", f"{where}: expected a list, got {value!r}")
        return list(value)
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError("type", f"{where}: expected an object, got {value!r}")
        return dict(value)
    return value


def _section_from_dict(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError("type", f"{where}: expected an object")
    hints = _hints(cls)
    unknown = set(doc) - set(hints)
    if unknown:
        raise ConfigError("unknown-key", f"{where}: unknown keys {sorted(unknown)}; valid keys: {sorted(hints)}")
    return cls(**{k: _coerce(v, hints[k], f"{where}.{k}") for k, v in doc.items()})


def config_from_dict(doc: dict) -> ExperimentConfig:
    hints = _hints(ExperimentConfig)
    unknown = set(doc) - set(hints)
    if unknown:
        raise ConfigError("unknown-key", f"unknown sections {sorted(unknown)}; valid keys: {sorted(hints)}")
    kwargs = {}
    for name, value in doc.items():
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _section_from_dict(hint, value, name)
        else:
            kwargs[name] = _normalize_augmentor(value, name)
    return ExperimentConfig(**kwargs)


def _normalize_augmentor(doc, where: str) -> dict:
    try:
        return augmentor_to_dict(augmentor_from_dict(doc))
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError("augmentor", f"{where}: {e}") from None


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("json", f"{path}: {e}") from None
    return config_from_dict(doc)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))


# --
# colon-path overrides

def parse_value(text: str) -> Any:
    """CLI values are JSON when they parse as JSON, otherwise plain strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _override_augmentor(aug: dict, keys: list[str], value, where: str) -> dict:
    parsed = augmentor_from_dict(aug)
    if keys == ["scheme"]:
        if not isinstance(parsed, Augmentor):
            raise ConfigError("unknown-key", f"{where}: composite augmentors have no single scheme; "
                                             f"address a child as {where}:<SCHEME>:<param>")
        return _normalize_augmentor(dict(augmentor_to_dict(parsed), scheme=value), where)
    if len(keys) == 1 and keys[0] in ("prob", "alpha", "eps", "k_steps", "walk_budget"):
        keys = [parsed.scheme if isinstance(parsed, Augmentor) else "?", keys[0]]
    if len(keys) != 2 or keys[0] not in SCHEMES:
        raise ConfigError("unknown-key", f"{where}:{':'.join(keys)}: expected <SCHEME>:<param> "
                                         f"with SCHEME among the configured {[l.scheme for l in leaves(parsed)]}")
    scheme, param = keys
    doc = copy.deepcopy(aug)
    hits = 0

    def visit(node):
        nonlocal hits
        if "compose" in node:
            for c in node["compose"]:
                visit(c)
        elif "children" in node:
            for c in node["children"]:
                visit(c)
        elif node.get("scheme") == scheme:
            hint = _hints(Augmentor)
            if param not in hint or param == "scheme":
                raise ConfigError("unknown-key", f"{where}:{scheme}: unknown parameter {param!r}; "
                                                 f"valid keys: {sorted(set(hint) - {'scheme'})}")
            node[param] = _coerce(value, hint[param], f"{where}:{scheme}:{param}")
            hits += 1
    visit(doc)
    if not hits:
        raise ConfigError("unknown-key", f"{where}: no {scheme} augmentor configured; "
                                         f"valid keys: {[l.scheme for l in leaves(parsed)]}")
    return _normalize_augmentor(doc, where)


def override(config: ExperimentConfig, path: str, value: Any) -> ExperimentConfig:
    """Return a copy of ``config`` with the colon-separated ``path`` set to ``value``.

    ``obj:infonce:tau`` style paths may name the loss between the section and
    the parameter; the loss name must be valid but does not switch the loss.
    """
    if isinstance(value, str):
        value = parse_value(value)
    keys = [k for k in path.lstrip("-").split(":") if k]
    if not keys:
        raise ConfigError("unknown-key", "empty override path")
    section = SECTION_ALIASES.get(keys[0], keys[0])
    hints = _hints(ExperimentConfig)
    if section not in hints:
        raise ConfigError("unknown-key", f"unknown section {keys[0]!r}; valid keys: {sorted(hints)}")
    new = copy.deepcopy(config)
    rest = keys[1:]
    if section in ("augmentor1", "augmentor2"):
        if not rest:
            setattr(new, section, _normalize_augmentor(value, section))
        else:
            setattr(new, section, _override_augmentor(getattr(new, section), rest, value, section))
        return new
    if section == "objective" and len(rest) == 2 and rest[0].lower() in LOSS_NAMES:
        rest = rest[1:]
    sec = getattr(new, section)
    sec_hints = _hints(type(sec))
    if len(rest) == 0:
        setattr(new, section, _section_from_dict(type(sec), value, section))
        return new
    name = rest[0]
    if name not in sec_hints:
        raise ConfigError("unknown-key", f"{section}: unknown key {name!r}; valid keys: {sorted(sec_hints)}")
    if len(rest) == 2 and sec_hints[name] is dict:
        current = dict(getattr(sec, name))
        if rest[1] not in current:
            raise ConfigError("unknown-key", f"{section}:{name}: unknown key {rest[1]!r}; valid keys: {sorted(current)}")
        current[rest[1]] = _coerce(value, type(current[rest[1]]), f"{section}:{name}:{rest[1]}")
        setattr(sec, name, current)
        return new
    if len(rest) != 1:
        raise ConfigError("unknown-key", f"{path}: {section}:{name} has no sub-keys")
    setattr(sec, name, _coerce(value, sec_hints[name], f"{section}:{name}"))
    return new


# --
# validation

NEGATIVE_SAMPLE = tuple(k for k in OBJECTIVES if k not in NEGATIVE_FREE)
MINER_OBJECTIVES = {"DCL": ("InfoNCE",), "HBNM": ("InfoNCE",), "HNM": NEGATIVE_SAMPLE, "CNS": NEGATIVE_SAMPLE}


def is_multi_graph(config: ExperimentConfig) -> bool:
    return config.dataset.kind == "graphs"


def validate_config(config: ExperimentConfig, multi_graph: bool | None = None) -> ExperimentConfig:
    """Reject malformed fields and incompatible combinations before any compute.

    ``multi_graph`` overrides the dataset-kind inference (file datasets).
    """
    try:
        config.aug(1), config.aug(2)
    except (TypeError, ValueError) as e:
        raise ConfigError("augmentor", str(e)) from None
    specs = {
        "encoder": config.encoder_spec, "readout": config.readout_spec, "objective": config.objective_spec,
        "miner": config.miner_spec,
    }
    for rule, make in specs.items():
        try:
            make()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(rule, str(e)) from None
    m = config.mode
    if m.mode not in ("LL", "GL", "GG"):
        raise ConfigError("mode", f"mode must be LL, GL or GG, got {m.mode!r}")
    if m.branch not in ("dual", "single"):
        raise ConfigError("mode", f"branch must be dual or single, got {m.branch!r}")
    obj = config.objective_spec().kind
    multi = is_multi_graph(config) if multi_graph is None else multi_graph
    if m.branch == "single" and m.mode != "GL":
        raise ConfigError("single-branch-requires-GL", f"single-branch contrasting is defined for GL only, got {m.mode}")
    if obj in ("BT", "VICReg") and m.mode == "GL":
        raise ConfigError(f"{obj}-incompatible-with-GL",
                          f"{obj} pairs embeddings of the same scale and cannot contrast graphs with nodes")
    if obj == "BL" and m.branch == "single":
        raise ConfigError("BL-requires-dual-branch", "the bootstrapped objective needs two augmented views")
    if m.mode == "GG" and not multi:
        raise ConfigError("GG-requires-multi-graph", "graph-graph contrasting needs a dataset of several graphs")
    miner = config.miner.kind
    if miner != "none" and obj not in MINER_OBJECTIVES[miner]:
        raise ConfigError(f"{miner}-requires-negative-objective",
                          f"miner {miner} works with {list(MINER_OBJECTIVES[miner])}, not {obj}")
    d = config.dataset
    if d.kind not in ("sbm", "graphs", "file"):
        raise ConfigError("dataset", f"dataset kind must be sbm, graphs or file, got {d.kind!r}")
    if d.kind == "file" and not d.path:
        raise ConfigError("dataset", "file datasets need a path")
    o = config.optimizer
    if o.lr <= 0 or o.weight_decay < 0 or o.epochs < 0 or o.patience < 1:
        raise ConfigError("optimizer", "need lr > 0, weight_decay >= 0, epochs >= 0, patience >= 1")
    e = config.eval
    if e.n_splits < 1 or not 0 < e.train_frac < 1 or not 0 <= e.valid_frac < 1 or e.train_frac + e.valid_frac >= 1:
        raise ConfigError("eval", "need n_splits >= 1 and train/valid fractions leaving a test set")
    return config
