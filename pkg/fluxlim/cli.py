#!/usr/bin/env python
"""Command line tool to run flux-limited chemotaxis experiments."""
import argparse
import asyncio
import logging
import sys
from dataclasses import replace

from fluxlim.config import ConfigError, configure_logging, load_experiment, with_overrides
from fluxlim.harness import run_experiment

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "run": "single",
    "sweep": "mass_sweep",
    "converge": "grid_convergence",
    "eps-study": "epsilon_study",
    "compare": "comparison",
}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxlim", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=f"run a {kind} experiment")
        sub.add_argument("--config", required=True, help="experiment INI file")
        sub.add_argument("--out", help="output directory (overrides experiment.output_dir)")
        sub.add_argument("--jobs", type=int, help="worker count (overrides experiment.jobs)")
    return parser


async def run_command(command: str, config_path: str, out: str | None, jobs: int | None) -> int:
    """Load the experiment, run it and report the verdict.

    Returns:
        Process exit code
    """
    spec = with_overrides(load_experiment(config_path), output_dir=out, jobs=jobs)
    kind = SUBCOMMANDS[command]
    if spec.kind != kind:
        logger.info("Running %s file %s as %s", spec.kind, config_path, kind)
        spec = replace(spec, kind=kind)
    print(f"Running {kind} experiment from {config_path}...")
    result = await run_experiment(spec)
    for key, value in result.summary().items():
        print(f"{key}: {value}")
    print(f"Results written to {spec.output_dir}")
    if not result.passed:
        print("Error: an inequality check failed", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def main(argv: list[str] | None = None) -> None:
    """Main entry point for the fluxlim CLI tool."""
    args = build_parser().parse_args(argv)
    if args.jobs is not None and args.jobs < 1:
        print(f"Error: --jobs must be positive, got {args.jobs}", file=sys.stderr)
        sys.exit(EXIT_ERROR)
    try:
        configure_logging()
        code = asyncio.run(run_command(args.command, args.config, args.out, args.jobs))
    except (ConfigError, ValueError, RuntimeError, OSError) as err:
        print(f"Error: {err}", file=sys.stderr)
        sys.exit(EXIT_ERROR)
    sys.exit(code)


if __name__ == "__main__":
    main()
