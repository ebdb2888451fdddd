"""Command-line interface.

Usage:
    mutual-taught run --config exp.toml [--seed N] [--out DIR] [--transfer]
    mutual-taught gradcheck [--seed N] [--instances K]
    mutual-taught ablate --axis filter|rm-data --config exp.toml
    mutual-taught baseline --method offline-dpo|iter-dpo --config exp.toml
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from mutual_taught.config import settings
from mutual_taught.errors import (
    EXIT_CONFIG,
    EXIT_RUNTIME,
    MutualTaughtError,
    exit_code_for,
)
from mutual_taught.experiments import run_ablation, run_experiment
from mutual_taught.gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from mutual_taught.schemas import ExperimentConfig
from mutual_taught.storage import load_config

logger = logging.getLogger(__name__)

BASELINES = {"offline-dpo": "offline-dpo", "iter-dpo": "iter-dpo-fixed-rm"}
AXES = {"filter": "filter", "rm-data": "rm_data"}


def _add_experiment_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON or TOML experiment file")
    parser.add_argument("--seed", type=int, help="Run this seed only")
    parser.add_argument("--out", type=Path, help="Output directory")
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help=f"Process pool size (default: WORKERS={settings.WORKERS})",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mutual-taught",
        description="Mutual-Taught policy/reward co-training on synthetic worlds",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    run_parser = subparsers.add_parser("run", help="Run the configured method")
    _add_experiment_args(run_parser)
    run_parser.add_argument(
        "--transfer", action="store_true", help="Also run the RM transfer evaluation"
    )
    run_parser.add_argument(
        "--save-env",
        action="store_true",
        help="Write env-<seed>.json and the selected checkpoints per seed",
    )
    run_parser.add_argument(
        "--save-pairs",
        action="store_true",
        help="Write M-step training pairs to pairs.jsonl",
    )

    grad_parser = subparsers.add_parser("gradcheck", help="Verify analytic gradients")
    grad_parser.add_argument("--seed", type=int, default=0, help="Instance seed")
    grad_parser.add_argument(
        "--instances", type=int, default=20, help="Random instances per gradient"
    )
    grad_parser.add_argument(
        "--tolerance", type=float, default=DEFAULT_TOLERANCE, help="Max relative error"
    )
    grad_parser.add_argument(
        "--perturb", type=float, default=0.0, help=argparse.SUPPRESS
    )

    ablate_parser = subparsers.add_parser("ablate", help="Paired ablation over seeds")
    _add_experiment_args(ablate_parser)
    ablate_parser.add_argument("--axis", choices=sorted(AXES), required=True)

    base_parser = subparsers.add_parser("baseline", help="Run a baseline method")
    _add_experiment_args(base_parser)
    base_parser.add_argument("--method", choices=sorted(BASELINES), required=True)
    return parser


def _experiment_config(args: argparse.Namespace, **overrides: Any) -> ExperimentConfig:
    """Load the config file (or defaults) and apply command-line overrides."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data: Dict[str, Any] = cfg.model_dump()
    if args.seed is not None:
        data["seeds"] = [args.seed]
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            data[section][name] = value
        else:
            data[key] = value
    return ExperimentConfig.model_validate(data)


def _gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck(args.seed, args.instances, args.tolerance, args.perturb)
    print(report.summary())
    report.raise_for_failure()
    return 0


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "gradcheck":
        return _gradcheck(args)
    if args.command == "run":
        overrides: Dict[str, Any] = {}
        if args.transfer:
            overrides["eval__transfer"] = True
        if args.save_env:
            overrides["save_env"] = True
        cfg = _experiment_config(args, **overrides)
        return run_experiment(cfg, args.out, args.workers, args.save_pairs)
    if args.command == "baseline":
        cfg = _experiment_config(
            args, method=BASELINES[args.method], eval__transfer=False
        )
        return run_experiment(cfg, args.out, args.workers)
    cfg = _experiment_config(args)
    return run_ablation(cfg, AXES[args.axis], args.out, args.workers)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run the command; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    try:
        return _dispatch(args)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except MutualTaughtError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return exit_code_for(e)
    except OSError as e:
        logger.error(f"{args.command} could not write its outputs: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
