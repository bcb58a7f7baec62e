"""Command line entry point: ``run``, ``compare``, ``partition`` and ``stats``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from fairfal.config import ConfigError, load_config, with_changes
from fairfal.evaluation import compare
from fairfal.harness import build_setup, read_curve_csv, run_comparison, run_seeds, strategy_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. training.comm_rounds=20")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--threads", type=int, help="worker threads (capped by FAIRFAL_MAX_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairfal", description="Federated active learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one strategy for one or more seeds")
    _common(run)
    run.add_argument("--seed", type=int, action="append", help="seed(s) to run; default: config seeds")
    run.add_argument("--strategy", help="override strategy, e.g. entropy:local")

    cmp_ = sub.add_parser("compare", help="paired AULC comparison of two strategies")
    _common(cmp_)
    cmp_.add_argument("--strategy-i", required=True)
    cmp_.add_argument("--strategy-j", required=True)
    cmp_.add_argument("--seed", type=int, action="append")

    part = sub.add_parser("partition", help="write the client partition as CSV")
    _common(part)
    part.add_argument("--seed", type=int, help="default: first config seed")

    stats = sub.add_parser("stats", help="paired statistics from two sets of curve CSVs")
    stats.add_argument("--curves-i", nargs="+", required=True, help="curve CSVs (or directories holding seed_*/curve.csv)")
    stats.add_argument("--curves-j", nargs="+", required=True)
    stats.add_argument("--out", help="also write the record to this file")
    return parser


def _load(args):
    cfg = load_config(args.config, args.overrides)
    changes = {}
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if args.threads is not None:
        changes["threads"] = args.threads
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    return with_changes(cfg, **changes) if changes else cfg


def _expand_curves(items: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            found = sorted(p.glob("seed_*/curve.csv")) or sorted(p.glob("*.csv"))
            if not found:
                raise FileNotFoundError(f"no curve CSVs under {p}")
            paths.extend(found)
        elif p.is_file():
            paths.append(p)
        else:
            raise FileNotFoundError(f"curve file not found: {p}")
    return paths


def _emit(record: dict, out: Optional[Path]) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(line + "\n")


def cmd_run(args) -> int:
    cfg = _load(args)
    seeds = args.seed or cfg.seeds
    records = run_seeds(cfg, seeds, Path(cfg.output_dir), cfg.threads)
    for s, rec in records.items():
        last = rec.curve[-1]
        print(f"seed {s}: final accuracy {last.test_accuracy:.4f} at labeled fraction {last.labeled_fraction:g}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    seeds = args.seed or cfg.seeds
    ci, cj = strategy_config(cfg, args.strategy_i), strategy_config(cfg, args.strategy_j)
    stats, _, _ = run_comparison(ci, cj, seeds, Path(cfg.output_dir), cfg.threads)
    rec = stats.record(args.strategy_i, args.strategy_j)
    rec["seeds"] = list(seeds)
    _emit(rec, Path(cfg.output_dir) / "compare.json")
    return 0


def cmd_partition(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    setup = build_setup(cfg, seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted((int(i), k, int(setup.train.labels[i])) for k, idx in enumerate(setup.client_indices) for i in idx)
    with (out / "partition.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "client", "class"])
        w.writerows(rows)
    print(out / "partition.csv")
    return 0


def cmd_stats(args) -> int:
    files_i, files_j = _expand_curves(args.curves_i), _expand_curves(args.curves_j)
    if len(files_i) != len(files_j):
        raise ValueError(f"seed count mismatch: {len(files_i)} vs {len(files_j)} curve files")
    curves_i = {s: read_curve_csv(p) for s, p in enumerate(files_i)}
    curves_j = {s: read_curve_csv(p) for s, p in enumerate(files_j)}
    _emit(compare(curves_i, curves_j).record(), Path(args.out) if args.out else None)
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "partition": cmd_partition, "stats": cmd_stats}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"fairfal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
