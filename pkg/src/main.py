"""Main entry point for the gang-of-bandits harness."""

import argparse
import logging
import sys
from typing import List, Optional

from src.config.settings import (
    LOG_LEVELS,
    apply_overrides,
    get_log_level,
    load_experiment_config,
    parse_policy_list,
)
from src.services.experiment_service import ExperimentService
from src.utils.exceptions import ConfigError
from src.utils.logging_utils import LOGGER_NAME, log_exception, logger, setup_logger

EXIT_OK = 0
EXIT_FAILED_CELLS = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the run, sweep, diagnose and learn-graph subcommands."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Path to the TOML experiment config")
    common.add_argument("--out", type=str, default=None, help="Output directory (overrides the config)")
    common.add_argument("--seed", type=int, default=None, help="Run only this seed")
    common.add_argument("--policy", type=str, default=None,
                        help="Comma-separated policy kinds, e.g. G-TS,TS-IND")
    common.add_argument("--t", type=int, default=None, help="Total rounds T")
    common.add_argument("--log-level", type=str, choices=list(LOG_LEVELS), default=None,
                        help="Set the logging level")

    parser = argparse.ArgumentParser(description="Gang-of-bandits GMRF simulation harness")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("run", parents=[common], help="Run every (policy, seed) cell and write run logs")
    sweep = commands.add_parser("sweep", parents=[common], help="Time policies over growing n (and d)")
    sweep.add_argument("--n-values", type=str, default=None, help="Comma-separated user counts")
    sweep.add_argument("--d-values", type=str, default=None, help="Comma-separated dimensions")
    commands.add_parser("diagnose", parents=[common], help="Write graph diagnostics as JSON")
    commands.add_parser("learn-graph", parents=[common], help="Run graph learning and export the result")
    return parser


def _int_list(raw: Optional[str]) -> Optional[List[int]]:
    if raw is None:
        return None
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, load the config and dispatch the subcommand.

    Returns:
        int: 0 on success, 1 when any cell failed, 2 on configuration errors
    """
    args = build_parser().parse_args(argv)
    try:
        level = args.log_level or get_log_level()
        setup_logger(LOGGER_NAME, getattr(logging, level))
        config = load_experiment_config(args.config)
        policies = parse_policy_list(args.policy) if args.policy else None
        config = apply_overrides(config, seed=args.seed, policies=policies, rounds=args.t, output_dir=args.out)
    except ConfigError as e:
        log_exception(e, "Invalid configuration")
        return EXIT_CONFIG

    try:
        if args.command == "run":
            result = ExperimentService.run_experiment(config)
            return EXIT_FAILED_CELLS if result.failed else EXIT_OK
        if args.command == "sweep":
            ExperimentService.timing_sweep(config, n_values=_int_list(args.n_values),
                                           d_values=_int_list(args.d_values))
        elif args.command == "diagnose":
            ExperimentService.write_diagnostics(config)
        elif args.command == "learn-graph":
            ExperimentService.learn_graph(config)
    except ConfigError as e:
        log_exception(e, "Invalid configuration")
        return EXIT_CONFIG
    except Exception as e:
        log_exception(e, f"Error in {args.command}")
        return EXIT_FAILED_CELLS
    logger.info(f"{args.command} finished; outputs in {config.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
