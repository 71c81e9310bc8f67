"""Command-line entry point: ``gclbench {synth,augment,train,eval,sweep}``.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .augment import apply, augmentor_from_dict
from .config import ConfigError, ExperimentConfig, load_config, override, parse_value, validate_config
from .evaluation import linear_probe
from .graph import gen_graph_dataset, graph_labels, load_graph, make_splits, save_graph
from .trainer import load_dataset, run_trial, sweep, sweep_csv

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def split_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """``--a:b value`` / ``--a:b=value`` pairs from the leftover argv."""
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError("cli", f"unexpected argument {tok!r}; overrides look like --section:key value")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError("cli", f"override {tok} is missing a value")
            key, value = tok[2:], tokens[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def resolve_config(path: str | None, tokens: list[str]) -> ExperimentConfig:
    config = load_config(path) if path else ExperimentConfig()
    for key, value in split_overrides(tokens):
        config = override(config, key, value)
    return config


def cmd_synth(args, config: ExperimentConfig) -> int:
    d = config.dataset
    if d.kind == "graphs":
        graphs = gen_graph_dataset(d.n_graphs, d.classes, (d.size_min, d.size_max), d.seed)
        save_graph(args.out, graphs)
        summary = {"graphs": len(graphs), "nodes": sum(g.num_nodes for g in graphs),
                   "edges": sum(g.num_edges for g in graphs)}
    elif d.kind == "sbm":
        g = load_dataset(config).graph
        save_graph(args.out, g)
        summary = {"graphs": 1, "nodes": g.num_nodes, "edges": g.num_edges}
    else:
        raise ConfigError("dataset", "synth generates sbm or graphs datasets, not files")
    print(json.dumps(dict(summary, out=str(args.out))))
    return EXIT_OK


def cmd_augment(args, config: ExperimentConfig) -> int:
    try:
        aug = augmentor_from_dict(parse_value(args.aug)) if args.aug else config.aug(1)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError("augmentor", str(e)) from None
    g = load_graph(args.graph)
    if isinstance(g, list):
        raise ConfigError("augment", "augment takes a single graph file")
    view = apply(aug, g, np.random.default_rng(args.seed))
    if args.out:
        save_graph(args.out, view)
    print(json.dumps({"nodes": view.num_nodes, "edges": view.num_edges,
                      "source_nodes": g.num_nodes, "source_edges": g.num_edges}))
    return EXIT_OK


def _precheck(config: ExperimentConfig) -> None:
    # file datasets are validated once loaded, when the graph count is known
    if config.dataset.kind != "file":
        validate_config(config)


def cmd_train(args, config: ExperimentConfig) -> int:
    _precheck(config)
    ds = load_dataset(config)
    validate_config(config, ds.multi_graph)
    result = run_trial(config, run_dir=args.run_dir, dataset=ds)
    print(result.report.table())
    print(json.dumps({"run_dir": str(result.run_dir), "epochs": len(result.loss_curve),
                      "best_epoch": result.best_epoch, "mean": result.report.mean, "std": result.report.std}))
    return EXIT_OK


def _labels(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path)
    loaded = load_graph(path)
    if isinstance(loaded, list):
        return graph_labels(loaded)
    if loaded.labels is None:
        raise ConfigError("eval", f"{path} carries no labels")
    return loaded.labels


def cmd_eval(args, config: ExperimentConfig) -> int:
    emb = np.load(args.embeddings)
    labels = _labels(args.labels)
    e = config.eval
    splits = make_splits(labels, e.n_splits, e.split_seed or 0, e.train_frac, e.valid_frac)
    report = linear_probe(emb, labels, splits, config.probe_params())
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def cmd_sweep(args, config: ExperimentConfig) -> int:
    _precheck(config)
    values = [parse_value(v) for v in args.values.split(",")]
    rows = sweep(config, args.axis, values, workers=args.workers, out_dir=args.out)
    sys.stdout.write(sweep_csv(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gclbench", description="Graph contrastive learning experiments.",
                                allow_abbrev=False, epilog="Any --section:key value pair after the options overrides the config.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON")
        return sp

    s = with_config(sub.add_parser("synth", allow_abbrev=False, help="generate the configured synthetic dataset"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = with_config(sub.add_parser("augment", allow_abbrev=False, help="write one augmented view of a graph"))
    s.add_argument("--graph", required=True)
    s.add_argument("--aug", help="augmentor JSON; defaults to the config's augmentor1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_augment)

    s = with_config(sub.add_parser("train", allow_abbrev=False, help="run one trial and probe the embeddings"))
    s.add_argument("--run-dir", help="artifact directory (default: $GCL_RUN_DIR/trial-<digest>)")
    s.set_defaults(func=cmd_train)

    s = with_config(sub.add_parser("eval", allow_abbrev=False, help="linear probe on saved embeddings"))
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True, help=".npy labels or a labeled graph JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = with_config(sub.add_parser("sweep", allow_abbrev=False, help="one trial per value of a config key"))
    s.add_argument("--axis", required=True, help="colon path, e.g. augmentor1:ER:prob")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="directory for sweep.csv and per-value runs")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        config = resolve_config(args.config, rest)
        code = args.func(args, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
