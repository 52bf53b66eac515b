"""Command-line entry point.

    opcomm simulate|train-forecaster|train-policy|evaluate|explain
           [--config PATH] [--out DIR] [--jobs N] [--seed S]

All parameters live in the config file; the flags only pick the file,
relocate the output directory (also via OPCOMM_OUT), replace the master
seed, and size the worker pool. Exit codes: 0 success, 2 config error,
3 missing or mismatched artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__, pipeline
from .config import ConfigError, MissingArtifactError, load_config
from .ppo import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERICAL = 4

_COMMANDS = {
    "simulate": (pipeline.cmd_simulate, "generate synthetic demand CSVs for the fleet"),
    "train-forecaster": (
        pipeline.cmd_train_forecaster,
        "fit per-station demand models and score them against the naive baseline",
    ),
    "train-policy": (
        pipeline.cmd_train_policy,
        "train the buffer policy on rollouts and write the reward curve",
    ),
    "evaluate": (
        pipeline.cmd_evaluate,
        "replay both methods on held-out days and render the report tables",
    ),
    "explain": (
        pipeline.cmd_explain,
        "attribute one station-day forecast and sweep its buffer options",
    ),
}


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opcomm",
        description="Forecast-then-buffer pipeline for station package demand.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument(
            "--config",
            default="opcomm.yaml",
            help="run configuration file (default: ./opcomm.yaml)",
        )
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument(
            "--jobs",
            type=_positive_int,
            default=1,
            help="worker processes for per-station stages (default 1, the reference schedule)",
        )
        cmd.add_argument(
            "--seed",
            type=int,
            default=None,
            help="override run.master_seed (changes the config hash)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command, _ = _COMMANDS[args.command]
    try:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        written = command(cfg, jobs=args.jobs)
    except ConfigError as exc:
        print(f"opcomm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"opcomm: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except NumericalError as exc:
        print(f"opcomm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
