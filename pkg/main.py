"""
Command-line entry point for the nonlinear monotonicity imaging toolkit.

    python main.py reconstruct --config experiment.json --seed 3
"""
import argparse
import logging
import sys
from typing import List, Optional

import structlog

from config import settings
from config.experiment import load_experiment_config
from mpm.mpm_utils import ConfigValidationError
from orchestrator import EXIT_CONFIG, MonotonicityOrchestrator, create_orchestrator
from run_history import create_run_history

logger = structlog.get_logger(__name__)


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.processors.format_exc_info,
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpm", description="Monotonicity-based imaging of nonlinear anomalies")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment JSON, merged over the built-in defaults")
    common.add_argument("--out", help="Output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="Noise seed (overrides noise.seed)")
    common.add_argument("--threads", type=int, help="Worker threads, 0 for one per CPU")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("forward", "Solve the forward problem for every excitation"),
        ("reconstruct", "Reconstruct the anomaly with the ideal and noisy test rules"),
        ("sweep", "Deterministic reconstructions along a decreasing noise sequence"),
        ("verify", "Run the oracle and property battery"),
        ("deplete", "Depleting potentials and their localization ratios"),
    ):
        commands.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = load_experiment_config(args.config, overrides={
            "noise.seed": args.seed,
            "output_dir": args.out,
            "threads": args.threads,
        })
    except ConfigValidationError as e:
        logger.error("❌ Invalid configuration", violations=e.violations)
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG

    orchestrator: MonotonicityOrchestrator = create_orchestrator(output_dir=config.output_dir, threads=config.threads)
    result = orchestrator.run(args.command, config)

    if settings.ENABLE_RUN_HISTORY:
        create_run_history(config.output_dir).add_run(result, config_path=args.config, seed=config.noise.seed)

    if result["exit_code"] == 0:
        logger.info("✅ Command completed", command=args.command, files=len(result["files"]))
    elif "violations" in result["summary"]:
        print("\n".join(f"  - {v}" for v in result["summary"]["violations"]), file=sys.stderr)
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
