"""``graphtrack`` command line: simulate | train | eval | sweep | bench.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiment as ex
from .dynamics import load_dataset, save_dataset
from .errors import GraphTrackError
from .kalmannet import evaluate, results_document, train
from .neural import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphtrack", description="Graph-signal tracking experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key = value experiment file")
        sp.add_argument("--from-artifact", type=Path, help="rerun using the config embedded in a JSON artifact")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help=f"global seed (fallback ${ex.SEED_ENV}, then 0)")
        sp.add_argument("--out", type=Path, default=Path("results"), help="output directory")

    sp = sub.add_parser("simulate", help="generate train/test datasets")
    common(sp)
    sp.add_argument("--csv", action="store_true", help="also export per-trajectory CSV")

    sp = sub.add_parser("train", help="train the gain network on a simulated pool")
    common(sp)
    sp.add_argument("--data", type=Path, help="training dataset (default OUT/train.gtds)")

    sp = sub.add_parser("eval", help="evaluate filters on a test set")
    common(sp)
    sp.add_argument("--data", type=Path, help="test dataset (default OUT/test.gtds)")
    sp.add_argument("--train-data", type=Path, help="training pool for lineage checks (default OUT/train.gtds)")
    sp.add_argument("--checkpoint", type=Path, help="network checkpoint (default OUT/model.gtck)")

    sp = sub.add_parser("sweep", help="MSE versus noise level for every filter")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    sp = sub.add_parser("bench", help="inference time versus graph size")
    common(sp)
    sp.add_argument("--sizes", help="comma-separated graph sizes (overrides config)")
    return p


def _load_config(args) -> ex.ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ex.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if getattr(args, "sizes", None):
        overrides["sizes"] = args.sizes
    if args.from_artifact:
        doc = json.loads(args.from_artifact.read_text())
        base = dict(doc["config"])
        base.update(overrides)
        cfg = ex.ExperimentConfig.from_mapping(base)
        has_seed = True
    elif args.config:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        text = args.config.read_text()
        cfg = ex.ExperimentConfig.from_text(text, overrides)
        has_seed = "seed" in overrides or any(line.split("=")[0].strip() == "seed" for line in text.splitlines() if "=" in line)
    else:
        cfg = ex.ExperimentConfig.from_mapping(overrides)
        has_seed = "seed" in overrides
    cfg.seed = ex.resolve_seed(args.seed, has_seed, cfg.seed)
    return cfg


def _artifact(cfg: ex.ExperimentConfig, command: str, **body) -> dict:
    return {"command": command, "config": cfg.to_json(), **body}


def cmd_simulate(cfg: ex.ExperimentConfig, out: Path, csv: bool = False) -> dict:
    data, model = ex.build_models(cfg, cfg.noise_level)
    pool, test = ex.datasets_for(cfg, data)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(pool, out / "train.gtds")
    save_dataset(test, out / "test.gtds")
    if csv:
        from .dynamics import export_csv

        export_csv(pool, out / "train_csv")
        export_csv(test, out / "test_csv")
    doc = _artifact(cfg, "simulate", datasets={"train": pool.hash(), "test": test.hash()},
                    graph_hash=data.graph.hash() if data.graph is not None else "")
    ex.write_json(out / "simulate.json", doc)
    return doc


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def cmd_train(cfg: ex.ExperimentConfig, out: Path, data: Optional[Path] = None) -> dict:
    pool = load_dataset(_need(data or out / "train.gtds"))
    _, model = ex.build_models(cfg, cfg.noise_level)
    result = train(pool, model, cfg.train_config())
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, out / "model.gtck")
    doc = results_document(cfg.to_json(), model.graph.hash() if model.graph is not None else "",
                           {"train": pool.hash(), "train_split": result.train_hash, "validation": result.val_hash}, result, [])
    doc["command"] = "train"
    ex.write_json(out / "train.json", doc)
    return doc


def cmd_eval(cfg: ex.ExperimentConfig, out: Path, data=None, train_data=None, checkpoint=None) -> dict:
    test = load_dataset(_need(data or out / "test.gtds"))
    pool_path = train_data or out / "train.gtds"
    pool = load_dataset(pool_path) if pool_path.exists() else None
    _, model = ex.build_models(cfg, cfg.noise_level)
    tuned = ex.tuned_filter_model(cfg, model, pool) if pool is not None else model
    reports = []
    for kind in cfg.filters:
        if kind == "gsp-kalmannet":
            net = load_checkpoint(_need(checkpoint or out / "model.gtck"))
            reports.append(evaluate(kind, test, model, net=net, exclude=[pool] if pool else []))
        else:
            reports.append(evaluate(kind, test, tuned, exclude=[pool] if pool else []))
    hashes = {"test": test.hash()}
    if pool is not None:
        hashes["train"] = pool.hash()
    doc = results_document(cfg.to_json(), model.graph.hash() if model.graph is not None else "", hashes, None, reports)
    doc["command"] = "eval"
    doc["per_trajectory"] = {r.filter: r.per_trajectory for r in reports}
    out.mkdir(parents=True, exist_ok=True)
    ex.write_json(out / "eval.json", doc)
    return doc


def cmd_sweep(cfg: ex.ExperimentConfig, out: Path, jobs: int = 1) -> list[dict]:
    rows, docs = ex.sweep(cfg, jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(ex.rows_to_csv(rows, ex.SWEEP_COLUMNS))
    ex.write_json(out / "sweep.json", _artifact(cfg, "sweep", csv_schema=ex.CSV_SCHEMA["sweep"], columns=ex.SWEEP_COLUMNS, rows=rows, points=docs))
    return rows


def cmd_bench(cfg: ex.ExperimentConfig, out: Path) -> list[dict]:
    rows, extra = ex.bench(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(ex.rows_to_csv(rows, ex.BENCH_COLUMNS))
    ex.write_json(out / "bench.json", _artifact(cfg, "bench", csv_schema=ex.CSV_SCHEMA["bench"], mse=extra["mse"],
                                                timing={"rows": rows, **extra["timing"]}))
    return rows


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except ex.ConfigError as exc:
        print(f"graphtrack: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"graphtrack: {exc}", file=sys.stderr)
        return EXIT_RUNTIME if isinstance(exc, OSError) else EXIT_USAGE
    try:
        if args.command == "simulate":
            cmd_simulate(cfg, args.out, args.csv)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.data)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, args.data, args.train_data, args.checkpoint)
        elif args.command == "sweep":
            if args.jobs < 1:
                print("graphtrack: --jobs must be >= 1", file=sys.stderr)
                return EXIT_USAGE
            cmd_sweep(cfg, args.out, args.jobs)
        else:
            cmd_bench(cfg, args.out)
    except ex.ConfigError as exc:
        print(f"graphtrack: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphTrackError, OSError, ArithmeticError) as exc:
        print(f"graphtrack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"graphtrack {args.command}: wrote {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
