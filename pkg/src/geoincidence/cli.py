"""Command-line entry point.

Usage::

    geoincidence synth    --config desk.ini
    geoincidence simulate --config desk.ini
    geoincidence forecast --config desk.ini --model sird --horizon 7
    geoincidence evaluate --config desk.ini

Exit codes: 0 success, 2 usage error, 3 data validation error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .geo_grid import GridError
from .pipeline import (MODELS, DataError, cmd_evaluate, cmd_forecast, cmd_simulate, cmd_synth,
                       load_config)
from .stconvs2s import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoincidence",
        description="Cell-level incidence mapping and forecasting from municipal case counts.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI configuration file")
        return p

    add("synth", "generate a synthetic country, its case files and gold rasters")
    add("simulate", "daily median and confidence-interval rasters from case counts")
    p = add("forecast", "rolling-origin predictions of one model")
    p.add_argument("--model", required=True, choices=MODELS + ("persistence",))
    p.add_argument("--horizon", required=True, type=_positive_int,
                   help="days ahead (e.g. 7 or 10)")
    p = add("evaluate", "backtest the configured models and write score tables")
    p.add_argument("--models", help="comma-separated subset of " + ",".join(MODELS))
    p.add_argument("--horizons", help="comma-separated horizons overriding the config")
    return parser


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("horizon must be >= 1")
    return v


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "synth":
            out = cmd_synth(cfg)
        elif args.command == "simulate":
            out = cmd_simulate(cfg)
        elif args.command == "forecast":
            out = cmd_forecast(cfg, args.model, args.horizon)
        else:
            models = args.models.split(",") if args.models else None
            if models and set(models) - set(MODELS):
                parser.print_usage(sys.stderr)
                print(f"geoincidence: unknown model in {args.models!r}", file=sys.stderr)
                return EXIT_USAGE
            try:
                horizons = [_positive_int(h) for h in args.horizons.split(",")] \
                    if args.horizons else None
            except argparse.ArgumentTypeError as exc:
                parser.print_usage(sys.stderr)
                print(f"geoincidence: --horizons: {exc}", file=sys.stderr)
                return EXIT_USAGE
            out = cmd_evaluate(cfg, models, horizons)
    # LinAlgError subclasses ValueError, so it must be caught first
    except (TrainingError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"geoincidence: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GridError, ValueError, OSError) as exc:
        print(f"geoincidence: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
