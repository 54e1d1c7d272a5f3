"""Command line entry point: ``grouppoison run <config.json> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from . import runner
from .errors import ConfigurationError, GroupPoisonError

THREADS_ENV = "GROUPPOISON_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def _sweep_arg(text: str) -> tuple[str, list]:
    axis, sep, values = text.partition("=")
    if not sep or not axis:
        raise ConfigurationError("expected AXIS=v1,v2,...", "sweep")
    parsed = []
    for v in filter(None, values.split(",")):
        try:
            parsed.append(json.loads(v))
        except json.JSONDecodeError:
            parsed.append(v)
    return axis, parsed


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grouppoison")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario configuration")
    run.add_argument("config", help="path to a JSON scenario document")
    run.add_argument("--out", default="results", help="output directory (default: results)")
    run.add_argument("--format", choices=("csv", "json", "plot"), default="csv", help="output table (default: csv)")
    run.add_argument("--sweep", help="AXIS=v1,v2,...")
    run.add_argument("--combined", action="store_true", help="run the EPIc-then-JTT pipeline")
    run.add_argument("--seed", type=int, help="override the base seed")
    return p


def _execute(args) -> int:
    try:
        cfg = runner.load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        sweep = _sweep_arg(args.sweep) if args.sweep else None
        if sweep:
            runner.sweep_configs(cfg, *sweep)  # validate before any work
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if sweep:
            records = runner.run_sweep(cfg, *sweep)
        elif args.combined:
            records = runner.run_combined(cfg)
        else:
            records = [runner.run_scenario(cfg)]
        path = runner.emit(records, args.format, args.out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GroupPoisonError, OSError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    for r in records:
        for e in r.errors:
            print(f"warning: {r.scenario}: {e}", file=sys.stderr)
    print(path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        with threadpool_limits(limits=int(threads)):
            return _execute(args)
    return _execute(args)


if __name__ == "__main__":
    sys.exit(main())
