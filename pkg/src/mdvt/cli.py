"""Command-line surface: prepare / train / sweep / eval.

Exit codes: 0 ok, 1 config, 2 data, 3 checkpoint, 4 runtime.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, trainer
from .dataset import (bundle_fingerprint, load_bundle, load_interactions,
                      load_modality_features, save_bundle, split_dataset,
                      ModalityBundle)
from .errors import CheckpointError, ConfigError, DataError, MdvtError
from .trainer import RunConfig

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: A003 - argparse API
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mdvt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest interactions and features "
                                       "into a dataset bundle")
    p.add_argument("--interactions", required=True,
                   help="user<TAB>item text file")
    p.add_argument("--feature", action="append", default=[],
                   metavar="NAME=PATH",
                   help="modality feature file (repeatable)")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--seed", type=int, default=0, help="split seed")

    p = sub.add_parser("train", help="run a warm-up strategy search and "
                                     "write a run report")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="run report path (JSON)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")

    p = sub.add_parser("sweep", help="grid sweep over config values")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", required=True, help="base JSON config")
    p.add_argument("--grid", required=True,
                   help="JSON mapping config keys to value lists")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true",
                   help="skip cells whose report already exists")

    p = sub.add_parser("eval", help="test metrics for a saved checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[5, 10])
    p.add_argument("--out", default=None, help="optional JSON output path")
    return parser


def _load_config(path: str, seed_override: int | None = None) -> RunConfig:
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    try:
        data = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config JSON must be an object of flat keys")
    config = RunConfig.from_dict(data)
    if seed_override is not None:
        config = dataclasses.replace(config, seed=seed_override)
    return config


def cmd_prepare(args) -> int:
    interactions = load_interactions(args.interactions)
    split = split_dataset(interactions, args.seed)
    features = {}
    names = ["id"]
    for spec in args.feature:
        if "=" not in spec:
            raise ConfigError(f"--feature must be NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        if name == "id":
            raise ConfigError('"id" is implicit and carries no feature file')
        features[name] = load_modality_features(
            path, name, interactions.num_items,
            item_index=interactions.item_index)
        names.append(name)
    modalities = ModalityBundle(tuple(names), features,
                                num_items=interactions.num_items)
    stats = save_bundle(args.out, split, modalities,
                        interactions.duplicates_dropped)
    print(json.dumps(stats, sort_keys=True, indent=2))
    return 0


def build_run_report(bundle_stats: dict, config: RunConfig,
                     warnings: list[str], result: trainer.SearchResult,
                     val_metrics, test_metrics,
                     wall_clock: float) -> dict:
    return {
        "tool_version": __version__,
        "config": config.to_dict(),
        "config_warnings": warnings,
        "dataset": {
            "num_users": bundle_stats["num_users"],
            "num_items": bundle_stats["num_items"],
            "num_interactions": bundle_stats["num_interactions"],
            "sparsity": bundle_stats["sparsity"],
        },
        "warmup": {
            "strategy": result.strategy,
            "candidates": result.candidates,
            "resolved_trigger": result.resolved_trigger,
            "dynamic_estimate": result.dynamic_estimate,
        },
        "history": result.best_history.to_dict(),
        "metrics": {
            "validation": val_metrics.to_dict(),
            "test": test_metrics.to_dict(),
        },
        "wall_clock_seconds": wall_clock,
    }


def _execute_train(bundle_dir: str, config: RunConfig, out_path: str) -> dict:
    start = time.perf_counter()
    bundle = load_bundle(bundle_dir)
    warnings = config.validate()
    for message in warnings:
        log.warning("config: %s", message)
    result = trainer.run_strategy_search(bundle, config)
    val_metrics = trainer.evaluate_split(result.best_state, bundle,
                                         result.best_config, "validation",
                                         with_buckets=True)
    test_metrics = trainer.evaluate_split(result.best_state, bundle,
                                          result.best_config, "test",
                                          with_buckets=True)
    report = build_run_report(bundle.stats, config, warnings, result,
                              val_metrics, test_metrics,
                              time.perf_counter() - start)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                   encoding="utf-8")
    trainer.save_checkpoint(out.with_suffix(".ckpt"), result.best_state,
                            result.best_config,
                            bundle_fingerprint(bundle_dir))
    return report


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    report = _execute_train(args.bundle, config, args.out)
    test = report["metrics"]["test"]
    print(f"test recall@10={test['recall']['10']:.6f} "
          f"ndcg@10={test['ndcg']['10']:.6f} "
          f"(report: {args.out})")
    return 0


def _sweep_cell(bundle_dir: str, config_dict: dict, out_path: str) -> dict:
    config = RunConfig.from_dict(config_dict)
    return _execute_train(bundle_dir, config, out_path)


def cmd_sweep(args) -> int:
    base = _load_config(args.config)
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise ConfigError(f"grid file not found: {grid_path}")
    grid = json.loads(grid_path.read_text(encoding="utf-8"))
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid must be a non-empty JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    bad = sorted(set(grid) - known)
    if bad:
        raise ConfigError(f"unknown grid keys: {', '.join(bad)}")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid values for {key!r} must be a "
                              "non-empty list")

    out_dir = Path(args.out)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        cfg_dict = base.to_dict()
        cfg_dict.update(overrides)
        config = RunConfig.from_dict(cfg_dict)
        cells.append((overrides, config))

    pending, rows = [], []
    for overrides, config in cells:
        cell_path = runs_dir / f"cell-{config.config_hash()[:16]}.json"
        if args.resume and cell_path.exists():
            report = json.loads(cell_path.read_text(encoding="utf-8"))
            rows.append((overrides, config, report, True))
        else:
            pending.append((overrides, config, cell_path))

    if args.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [
                (overrides, config, pool.submit(
                    _sweep_cell, args.bundle, config.to_dict(),
                    str(cell_path)))
                for overrides, config, cell_path in pending]
            for overrides, config, fut in futures:
                rows.append((overrides, config, fut.result(), False))
    else:
        for overrides, config, cell_path in pending:
            report = _sweep_cell(args.bundle, config.to_dict(),
                                 str(cell_path))
            rows.append((overrides, config, report, False))

    summary = []
    for overrides, config, report, resumed in rows:
        summary.append({
            "config_hash": config.config_hash()[:16],
            "overrides": overrides,
            "val_ndcg10": report["metrics"]["validation"]["ndcg"]["10"],
            "val_recall10": report["metrics"]["validation"]["recall"]["10"],
            "test_ndcg10": report["metrics"]["test"]["ndcg"]["10"],
            "test_recall10": report["metrics"]["test"]["recall"]["10"],
            "resumed": resumed,
        })
    summary.sort(key=lambda r: (-r["val_ndcg10"], r["config_hash"]))
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    with (out_dir / "summary.csv").open("w", newline="",
                                        encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash", "overrides", "val_ndcg10",
                         "val_recall10", "test_ndcg10", "test_recall10",
                         "resumed"])
        for row in summary:
            writer.writerow([row["config_hash"],
                             json.dumps(row["overrides"], sort_keys=True),
                             row["val_ndcg10"], row["val_recall10"],
                             row["test_ndcg10"], row["test_recall10"],
                             row["resumed"]])
    print(f"{len(summary)} cells "
          f"({sum(1 for r in summary if r['resumed'])} resumed); "
          f"best val ndcg@10={summary[0]['val_ndcg10']:.6f}")
    return 0


def cmd_eval(args) -> int:
    config, stored_fp, tables = trainer.load_checkpoint(args.checkpoint)
    actual_fp = bundle_fingerprint(args.bundle)
    if stored_fp != actual_fp:
        raise CheckpointError(
            f"checkpoint was trained on a different bundle "
            f"(stored {stored_fp[:12]}, bundle {actual_fp[:12]})")
    bundle = load_bundle(args.bundle)
    state = trainer.state_from_tables(tables, config.embed_dim)
    config = dataclasses.replace(config, eval_ks=tuple(sorted(set(args.k))))
    metrics = trainer.evaluate_split(state, bundle, config, "test",
                                     with_buckets=True)
    payload = metrics.to_dict()
    for k in sorted(set(args.k)):
        print(f"recall@{k}={payload['recall'][str(k)]:.6f} "
              f"ndcg@{k}={payload['ndcg'][str(k)]:.6f}")
    for bucket in payload["buckets"]:
        hi = bucket["hi"] if bucket["hi"] is not None else "+"
        print(f"bucket [{bucket['lo']}-{hi}] users={bucket['count']}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "prepare": cmd_prepare,
            "train": cmd_train,
            "sweep": cmd_sweep,
            "eval": cmd_eval,
        }[args.command]
        return handler(args)
    except MdvtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
