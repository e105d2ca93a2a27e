"""Command line: ``toamim <command> [--config PATH] [--out DIR] [--seed N] [--workers N] [--precision {32,64}]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ParameterError, ToaMimError

COMMANDS = tuple(pipeline.STAGES) + ("all",)


def _workers_default() -> int | None:
    raw = os.environ.get("SVTA_WORKERS")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ParameterError(f"SVTA_WORKERS must be an integer, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toamim", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="run config JSON, or a bundled name (default, smoke)")
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--workers", type=int, default=None, help="worker count (default: $SVTA_WORKERS or config)")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        workers = args.workers if args.workers is not None else _workers_default()
        cfg = load_config(args.config).with_overrides(args.seed, workers, args.precision)
        stages = pipeline.PIPELINE if args.command == "all" else (args.command,)
        results = pipeline.run_pipeline(cfg, args.out, stages)
    except ToaMimError as exc:
        print(f"toamim {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    for stage in results:
        print(f"{stage}: done")
    print(f"outputs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
