from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from restless_bai.errors import RestlessBaiError
from restless_bai.infra.logging import get_logger, setup_logging
from restless_bai.infra.metrics import get_metrics
from restless_bai.infra.settings import get_settings

from .commands import CommandResult, cmd_family, cmd_lower_bound, cmd_simulate, cmd_validate
from .config import ExperimentConfig, parse_config

logger = get_logger(__name__)

COMMANDS = ("family", "lower-bound", "simulate", "validate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restless-bai",
        description="Best-arm identification for restless Markov bandits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, type=Path, help="Experiment config (JSON).")
        cmd.add_argument(
            "--output-dir", type=Path, default=None, help="Directory for output files."
        )
        cmd.add_argument("--trials", type=int, default=None, help="Override the number of trials.")
        cmd.add_argument("--delta", type=float, default=None, help="Override the confidence level.")
        cmd.add_argument("--seed", type=int, default=None, help="Override the master seed.")
        cmd.add_argument(
            "--parallel", type=int, default=1, help="Worker threads for simulate (default 1)."
        )
    return parser


def _resolve(args: argparse.Namespace) -> tuple[ExperimentConfig, Path]:
    cfg = parse_config(args.config).with_overrides(
        trials=args.trials, delta=args.delta, master_seed=args.seed
    )
    output_dir = args.output_dir or Path(cfg.output_dir or get_settings().default_output_dir)
    return cfg, output_dir


def dispatch(args: argparse.Namespace) -> CommandResult:
    cfg, output_dir = _resolve(args)
    metrics = get_metrics(get_settings())
    if args.command == "family":
        return cmd_family(cfg, output_dir)
    if args.command == "lower-bound":
        return cmd_lower_bound(cfg, output_dir, metrics)
    if args.command == "simulate":
        return cmd_simulate(cfg, output_dir, metrics, parallel=max(args.parallel, 1))
    return cmd_validate(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    setup_logging(settings)
    args = build_parser().parse_args(argv)
    try:
        result = dispatch(args)
    except RestlessBaiError as exc:
        get_metrics(settings).inc_error(args.command)
        logger.error(
            "command_failed",
            extra={"command": args.command, "error": type(exc).__name__, "detail": str(exc)},
        )
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if result.text:
        print(result.text)
    logger.info(
        "command_finished",
        extra={
            "command": args.command,
            "exit_code": result.exit_code,
            "files": [str(p) for p in result.files],
        },
    )
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
