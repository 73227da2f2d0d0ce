"""Command-line entry point.

    prunability <task> --config <path> [--out <dir>] [--seed <n>]

Tasks: train, spectrum, predict, sweep, verify-escape, report, full.
Exit codes: 0 success, 1 config error, 2 stage failure, 3 lock
conflict. Set PRUNABILITY_LOG (DEBUG/INFO/WARNING/ERROR) for log
verbosity; the default is INFO.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import TASKS, ConfigError, parse_config
from .stages import LockHeldError, StageError, Workspace, run_task


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunability",
        description="Predict and verify the maximum one-shot pruning ratio of a small network.",
    )
    parser.add_argument("task", choices=TASKS, help="pipeline task to run")
    parser.add_argument("--config", required=True, help="path to the run configuration file")
    parser.add_argument("--out", default=None, help="output directory (overrides [run] out)")
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides [run] seed)")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("PRUNABILITY_LOG", "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; usage
        # errors are config errors in this tool's exit-code contract.
        return 0 if exc.code == 0 else 1

    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out=args.out)
        if not cfg.out:
            raise ConfigError("no output directory: set [run] out or pass --out")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    ws = Workspace(cfg.out)
    try:
        run_task(args.task, cfg, ws)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except LockHeldError as exc:
        print(f"lock conflict: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"{exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
