"""Command-line front end: ``reworkpolicy {simulate,fit,cate,policy,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import pipeline
from .errors import (
    ConfigurationError,
    CrossfitError,
    DataValidationError,
    DegenerateDataError,
    EstimandUndefinedError,
    FitError,
    InsufficientDataError,
    ReworkPolicyError,
    SchemaError,
    ShapeError,
    SingularityError,
    StratificationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ESTIMATION = 3
EXIT_IO = 4

_CONFIG_ERRORS = (ConfigurationError, SchemaError, DataValidationError, DegenerateDataError, ShapeError)
_ESTIMATION_ERRORS = (
    CrossfitError,
    FitError,
    SingularityError,
    InsufficientDataError,
    EstimandUndefinedError,
    StratificationError,
)

COMMANDS = {
    "simulate": pipeline.run_simulate,
    "fit": pipeline.run_fit,
    "cate": pipeline.run_cate,
    "policy": pipeline.run_policy,
    "report": pipeline.run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reworkpolicy", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="seed (overrides config)")
    parser.add_argument("--threads", type=int, default=1, help="accepted for compatibility; execution is serial")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, _ESTIMATION_ERRORS):
        return EXIT_ESTIMATION
    if isinstance(exc, (_CONFIG_ERRORS, ReworkPolicyError, json.JSONDecodeError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError("--threads must be positive")
        cfg = pipeline.load_config(args.config)
        updates = {}
        if args.out is not None:
            updates["out"] = args.out
        if args.seed is not None:
            updates["seed"] = args.seed
            if cfg.simulate is not None:
                updates["simulate"] = replace(cfg.simulate, seed=args.seed)
        if updates:
            cfg = replace(cfg, **updates)
        COMMANDS[args.command](cfg)
    except Exception as exc:  # mapped to documented exit codes
        code = exit_code(exc)
        print(f"reworkpolicy {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
