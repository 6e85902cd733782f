"""Command-line entry point: ``idea run``, ``idea report`` and ``idea assets inspect``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from .assets import load_library
from .errors import ConfigError, IdeaError
from .harness import find_records, load_config, report, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
_LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging():
    name = os.environ.get("IDEA_LOG", "quiet").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(name, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out_dir = args.out_dir if args.out_dir is not None else cfg.out_dir
    record = run_experiment(cfg, out_dir, assets_in=args.assets_in, assets_out=args.assets_out)
    s = record.summary
    by_cycle = ", ".join(f"{c:.3f}" for c in s["coverage_rate_by_cycle"])
    print(f"variant={cfg.variant} repetitions={cfg.repetitions} coverage_by_cycle=[{by_cycle}] "
          f"reduction={s['mean_discrepancy_reduction']:.4f} optimizations={s['total_optimizations']} "
          f"-> {record.out_dir}")
    return EXIT_OK


def _cmd_report(args) -> int:
    records = find_records(args.input)
    if not records:
        print(f"no runs found under {args.input}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.write(report(records, args.out))
    return EXIT_OK


def _cmd_inspect(args) -> int:
    lib = load_library(args.path)
    u = np.array([a.uncertainty for a in lib])
    print("format: idea-assets/1")
    print(f"count: {len(lib)} / capacity {lib.capacity}")
    print(f"dims: L={lib.prompt_len} C={lib.feature_dim}")
    if len(lib):
        counts, edges = np.histogram(u, bins=min(5, len(lib)))
        print("uncertainty histogram:")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            print(f"  [{lo:.4f}, {hi:.4f}] {'#' * int(c)} {c}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idea", description="Test-time adaptation simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--assets-in")
    run.add_argument("--assets-out")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="aggregate finished runs")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_cmd_report)

    assets = sub.add_parser("assets", help="asset library tools")
    assets_sub = assets.add_subparsers(dest="assets_command", required=True)
    inspect = assets_sub.add_parser("inspect", help="summarize an asset library file")
    inspect.add_argument("path")
    inspect.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdeaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
