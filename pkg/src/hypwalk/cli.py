"""Command-line runner: ``hypwalk <experiment> --config file.toml --out dir``.

Exit codes: 0 success, 2 configuration rejected, 3 estimator failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, load
from .experiments import COMMANDS, DEFAULT_FORMAT, EstimatorFailure

log = logging.getLogger("hypwalk")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATOR = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypwalk", description="Random walks on free groups acting on the "
                                 "hyperbolic plane and on trees.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--format", choices=("csv", "json"), default=None)
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for {cfg.experiment!r}, not {args.command!r}")
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        fmt = args.format or DEFAULT_FORMAT[args.command]
        outcome = COMMANDS[args.command](cfg, jobs=args.jobs, fmt=fmt)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimatorFailure, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"estimator failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR
    args.out.mkdir(parents=True, exist_ok=True)
    for name, text in outcome.files.items():
        (args.out / name).write_text(text, encoding="utf-8", newline="\n")
        log.info("wrote %s", args.out / name)
    for m in outcome.messages:
        print(f"warning: {m}", file=sys.stderr)
    return EXIT_OK if outcome.ok else EXIT_ESTIMATOR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
