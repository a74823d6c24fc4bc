"""Experiment CLI: dataset ingestion, synthetic graphs, training runs,
sweeps, and visualization-data exports.

Config files are flat `key = value` text; `#` starts a comment. The output
root comes from the PRIOPROP_OUTPUT_ROOT environment variable (default
./runs); everything else is passed via flags or config keys.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import (DatasetBundle, SbmSpec, generate_sbm, load_dataset,
                   save_dataset)
from .errors import ConfigError, InputError
from .optim import load_checkpoint, save_checkpoint
from .priority import build_priority, write_priority_tsv
from .trainer import (TrainConfig, Trainer, grid_search, expand_space,
                      write_weights_steps_tsv)

DEPTH_SWEEP_DEFAULT = (2, 4, 8, 16, 32, 64)

# Experiment-level keys; everything else must name a TrainConfig field,
# a grid_<field> list, or an sbm_<field> value.
_EXPERIMENT_KEYS = {
    "name": str,
    "data_dir": str,
    "split": str,
    "split_seed": int,
    "mode": str,           # single | depth_sweep | grid
    "repeats": int,
    "base_seed": int,
    "depths": str,
    "budget": int,
}


def parse_config_file(path) -> dict:
    """Parse flat `key = value` lines into a raw string dict."""
    raw = {}
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError("expected `key = value`", path=path, line=lineno)
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    return target_type(value)


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_types(dataclass_type) -> dict:
    return {f.name: _TYPE_NAMES[f.type.strip()] for f in fields(dataclass_type)}


def build_train_config(raw: dict) -> TrainConfig:
    """TrainConfig from the config-file keys that name its fields."""
    types = _field_types(TrainConfig)
    kwargs = {k: _coerce(v, types[k]) for k, v in raw.items() if k in types}
    return TrainConfig(**kwargs)


def load_bundle_from_config(raw: dict) -> DatasetBundle:
    if "data_dir" in raw:
        return load_dataset(raw["data_dir"],
                            split=raw.get("split", "standard"),
                            seed=int(raw.get("split_seed", 0)))
    sbm_keys = {k[4:]: v for k, v in raw.items() if k.startswith("sbm_")}
    if not sbm_keys:
        raise ConfigError("config needs either data_dir or sbm_* keys")
    spec_types = _field_types(SbmSpec)
    kwargs = {}
    for key, value in sbm_keys.items():
        if key not in spec_types:
            raise ConfigError(f"unknown sbm key sbm_{key}")
        kwargs[key] = _coerce(value, spec_types[key])
    return generate_sbm(SbmSpec(**kwargs))


def output_root() -> Path:
    return Path(os.environ.get("PRIOPROP_OUTPUT_ROOT", "runs"))


def _aggregate_rows(path: Path, rows: list[tuple]) -> None:
    with path.open("w") as fh:
        fh.write("depth,repeats,mean_test_accuracy,std_test_accuracy\n")
        for depth, accs in rows:
            mean = float(np.mean(accs))
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
            fh.write(f"{depth},{len(accs)},{mean!r},{std!r}\n")


def _run_repeats(config: TrainConfig, bundle: DatasetBundle, repeats: int,
                 base_seed: int, out: Path, tag: str) -> list[float]:
    accs = []
    for i in range(repeats):
        cfg = replace(config, seed=base_seed + i)
        trainer = Trainer(cfg, bundle)
        report = trainer.fit()
        report.to_csv(out / f"report_{tag}seed{cfg.seed}.csv")
        (out / f"summary_{tag}seed{cfg.seed}.txt").write_text(
            report.summary_text()
            + f"wall_clock_seconds = {report.wall_clock:.3f}\n")
        write_weights_steps_tsv(report.weights, report.steps,
                                out / f"weights_steps_{tag}seed{cfg.seed}.tsv")
        save_checkpoint(trainer.params, out / f"params_{tag}seed{cfg.seed}.ckpt")
        accs.append(report.test_accuracy)
    return accs


def run_experiment(config_path) -> Path:
    """Execute a config file; returns the output directory.

    Partial results are kept on failure, with a FAILED.txt marker holding
    the traceback, and the error is re-raised.
    """
    raw = parse_config_file(config_path)
    unknown = [k for k in raw
               if k not in _EXPERIMENT_KEYS
               and not k.startswith(("sbm_", "grid_"))
               and k not in {f.name for f in fields(TrainConfig)}]
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    name = raw.get("name", Path(config_path).stem)
    out = output_root() / name
    out.mkdir(parents=True, exist_ok=True)
    try:
        bundle = load_bundle_from_config(raw)
        config = build_train_config(raw)
        mode = raw.get("mode", "single")
        repeats = int(raw.get("repeats", 1))
        base_seed = int(raw.get("base_seed", config.seed))
        pf = build_priority(bundle.graph, bundle.features)
        write_priority_tsv(pf, out / "priority.tsv")
        if mode == "single":
            accs = _run_repeats(config, bundle, repeats, base_seed, out, "")
            _aggregate_rows(out / "aggregate.csv", [(config.num_steps, accs)])
        elif mode == "depth_sweep":
            depths = [int(v) for v in
                      raw.get("depths", ",".join(map(str, DEPTH_SWEEP_DEFAULT))).split(",")]
            rows = []
            for L in depths:
                accs = _run_repeats(replace(config, num_steps=L), bundle,
                                    repeats, base_seed, out, f"L{L}_")
                rows.append((L, accs))
            _aggregate_rows(out / "aggregate.csv", rows)
        elif mode == "grid":
            space = {}
            types = _field_types(TrainConfig)
            for key, value in raw.items():
                if key.startswith("grid_"):
                    field_name = key[5:]
                    if field_name not in types:
                        raise ConfigError(f"unknown grid key {key}")
                    space[field_name] = [_coerce(v.strip(), types[field_name])
                                         for v in value.split(",")]
            if not space:
                raise ConfigError("grid mode needs grid_<field> keys")
            budget = int(raw["budget"]) if "budget" in raw else None
            best, leaderboard = grid_search(space, bundle, budget=budget,
                                            base=config)
            with (out / "leaderboard.csv").open("w") as fh:
                keys = list(space)
                fh.write(",".join(keys) + ",val_accuracy,test_accuracy\n")
                for entry in leaderboard:
                    vals = [repr(getattr(entry.config, k)) for k in keys]
                    fh.write(",".join(vals)
                             + f",{entry.val_accuracy!r},{entry.test_accuracy!r}\n")
            accs = _run_repeats(best, bundle, repeats, base_seed, out, "best_")
            _aggregate_rows(out / "aggregate.csv", [(best.num_steps, accs)])
        else:
            raise ConfigError(f"unknown mode {mode!r}")
    except Exception:
        (out / "FAILED.txt").write_text(traceback.format_exc())
        raise
    return out


def write_dot(bundle: DatasetBundle, weights, steps, path) -> None:
    """DOT text with per-node weight/step attributes for case studies."""
    with open(path, "w") as fh:
        fh.write(f"graph {bundle.name.replace('-', '_')} {{\n")
        for i in range(bundle.graph.n):
            fh.write(f"  {i} [label={int(bundle.labels.y[i])}, "
                     f"weight={float(weights[i]):.6f}, step={int(steps[i])}];\n")
        for src, dst in bundle.graph.edge_pairs():
            fh.write(f"  {src} -- {dst};\n")
        fh.write("}\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="prioprop",
        description="prioritized node-wise message propagation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="validate a dataset directory")
    p_ingest.add_argument("directory")
    p_ingest.add_argument("--split", default="standard",
                          choices=["standard", "proportional"])
    p_ingest.add_argument("--seed", type=int, default=0)

    p_synth = sub.add_parser("synth", help="generate a block-model dataset")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--blocks", type=int, required=True)
    p_synth.add_argument("--p-in", type=float, required=True)
    p_synth.add_argument("--p-out", type=float, required=True)
    p_synth.add_argument("--dim", type=int, default=32)
    p_synth.add_argument("--separation", type=float, default=1.0)
    p_synth.add_argument("--labels-per-class", type=int, default=10)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("--config", required=True)

    p_sweep = sub.add_parser("sweep", help="run a depth sweep or grid config")
    p_sweep.add_argument("--config", required=True)

    p_export = sub.add_parser("export-priority",
                              help="export priority measures and, given a "
                                   "checkpoint, learned weights and steps")
    p_export.add_argument("--data", required=True)
    p_export.add_argument("--split", default="standard",
                          choices=["standard", "proportional"])
    p_export.add_argument("--seed", type=int, default=0)
    p_export.add_argument("--checkpoint")
    p_export.add_argument("--config")
    p_export.add_argument("--out", default=".")
    p_export.add_argument("--dot", action="store_true")

    args = parser.parse_args(argv)
    if args.command == "ingest":
        bundle = load_dataset(args.directory, split=args.split, seed=args.seed)
        print(f"name: {bundle.name}")
        print(f"nodes: {bundle.graph.n}")
        print(f"edges: {bundle.graph.num_edges}")
        print(f"features: {bundle.features.shape[1]}")
        print(f"classes: {bundle.labels.num_classes}")
        print(f"split: train={bundle.masks.m} val={int(bundle.masks.val.sum())} "
              f"test={int(bundle.masks.test.sum())}")
        print(f"provenance: {bundle.provenance}")
    elif args.command == "synth":
        spec = SbmSpec(n=args.n, blocks=args.blocks, p_in=args.p_in,
                       p_out=args.p_out, feature_dim=args.dim,
                       separation=args.separation,
                       labels_per_class=args.labels_per_class, seed=args.seed)
        bundle = generate_sbm(spec)
        save_dataset(bundle, args.out)
        print(f"wrote {bundle.name} to {args.out} ({bundle.provenance})")
    elif args.command in ("train", "sweep"):
        out = run_experiment(args.config)
        print(f"results in {out}")
    elif args.command == "export-priority":
        bundle = load_dataset(args.data, split=args.split, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pf = build_priority(bundle.graph, bundle.features)
        write_priority_tsv(pf, out / "priority.tsv")
        print(f"wrote {out / 'priority.tsv'}")
        if args.checkpoint:
            if not args.config:
                raise ConfigError("--checkpoint needs --config for the model shape")
            config = build_train_config(parse_config_file(args.config))
            trainer = Trainer(config, bundle)
            trainer.params = load_checkpoint(args.checkpoint)
            fw = trainer._forward(train=False)
            weights = (trainer._priority_weights(fw).data[:, 0]
                       if config.weight_controller else np.ones(bundle.graph.n))
            write_weights_steps_tsv(weights, fw.steps, out / "weights_steps.tsv")
            print(f"wrote {out / 'weights_steps.tsv'}")
            if args.dot:
                write_dot(bundle, weights, fw.steps, out / "case_study.dot")
                print(f"wrote {out / 'case_study.dot'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
