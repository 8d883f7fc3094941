#!/usr/bin/env python3
"""
FLEXFL - Command Line
=====================
Experiment runner for flexible-aggregation federated learning over OFDMA.

Subcommands:
    run     training runs for every (allocator, K) point at one seed
    sweep   seed-averaged objective and sum rate over K or L
    verify  oracle certification and gap-vs-bound suites at reduced scale
    emit    plot-ready CSV files from a saved result bundle

Exit codes: 0 success, 1 run error, 2 configuration error.

Run with: python -m flexfl.main run --seed 0
"""

import argparse
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from flexfl.config import ALLOCATOR_KINDS, ConfigError, ExperimentConfig, load_config
from flexfl.logger import configure as configure_logging
from flexfl.logger import disable_console, enable_debug, get_log_file_path, get_logger
from flexfl.services.harness import (
    ExperimentSpec,
    ResultBundle,
    emit_plot_data,
    run_experiment,
    sweep_objective,
    verify_bound,
    verify_oracle,
)
from flexfl.utils import fmt_rate, fmt_sci, fmt_val

log = get_logger('cli')

EXIT_OK = 0
EXIT_RUN_ERROR = 1
EXIT_CONFIG_ERROR = 2


# =============================================================================
# ARGUMENTS
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexfl",
        description="Flexible-aggregation federated learning over OFDMA: simulator and allocator",
    )
    parser.add_argument("--config", help="TOML configuration file (defaults: built-in system parameters)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration key (repeatable)")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="No log output on the console")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Train under each allocator and K")
    run.add_argument("--seed", type=int, required=True, help="Run seed (mandatory)")
    run.add_argument("--allocator", action="append", choices=ALLOCATOR_KINDS,
                     help="Allocator kind (repeatable; default from config)")
    run.add_argument("--rounds", type=int, help="Aggregation rounds G")
    run.add_argument("--out", help="Output directory (default harness.out_dir)")

    sweep = sub.add_parser("sweep", help="Objective and sum rate over K or L")
    sweep.add_argument("--axis", choices=("K", "L"), default="K")
    sweep.add_argument("--values", type=int, nargs="+", help="Axis values (default from config)")
    sweep.add_argument("--allocator", action="append", choices=ALLOCATOR_KINDS)
    sweep.add_argument("--out", help="Output directory (default harness.out_dir)")

    verify = sub.add_parser("verify", help="Oracle and bound suites")
    verify.add_argument("--instances", type=int, default=100, help="Oracle instances")
    verify.add_argument("--rounds", type=int, default=100, help="Bound-check rounds")
    verify.add_argument("--replicas", type=int, default=20, help="Bound-check replicas")
    verify.add_argument("--seed", type=int, default=0)

    emit = sub.add_parser("emit", help="Write plot data from a saved bundle")
    emit.add_argument("--bundle", required=True, help="Directory written by 'run' or 'sweep'")
    emit.add_argument("--out", help="Output directory (default: the bundle directory)")
    return parser


# =============================================================================
# COMMANDS
# =============================================================================

def _table(title: str, frame, formats: dict) -> Table:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right" if column in formats else "left")
    for _, row in frame.iterrows():
        table.add_row(*[formats.get(c, str)(row[c]) for c in frame.columns])
    return table


def cmd_run(args, config: ExperimentConfig, console: Console) -> int:
    overrides = {'seeds': (args.seed,)}
    if args.allocator:
        overrides['allocators'] = tuple(args.allocator)
    if args.rounds is not None:
        overrides['rounds'] = args.rounds
    spec = ExperimentSpec.from_config(config, **overrides)
    bundle = run_experiment(spec, progress=True)
    out_dir = args.out or config.harness.out_dir
    bundle.save(out_dir)
    emit_plot_data(bundle, out_dir)

    console.print(_table(f"Summary ({spec.digest})", bundle.summary(), {
        'final_loss': fmt_val, 'final_accuracy': fmt_val,
        'mean_objective': fmt_sci, 'mean_sum_rate': fmt_rate,
    }))
    for error in bundle.errors:
        console.print(f"[red]error[/red] {error}")
    console.print(f"Results saved: {os.path.abspath(out_dir)}")
    return bundle.exit_code


def cmd_sweep(args, config: ExperimentConfig, console: Console) -> int:
    overrides = {}
    if args.allocator:
        overrides['allocators'] = tuple(args.allocator)
    spec = ExperimentSpec.from_config(config, **overrides)
    table = sweep_objective(spec, args.axis, args.values)
    bundle = ResultBundle(spec=spec.to_dict(), sweeps={args.axis: table})
    out_dir = args.out or config.harness.out_dir
    bundle.save(out_dir)
    emit_plot_data(bundle, out_dir)
    console.print(_table(f"Objective vs {args.axis}", table, {
        'mean_objective': fmt_sci, 'mean_sum_rate': fmt_rate, 'runs': str,
    }))
    return EXIT_OK


def cmd_verify(args, config: ExperimentConfig, console: Console) -> int:
    oracle = verify_oracle(config, args.instances, args.seed)
    console.print(_table("Dual solver vs brute force", oracle, {'solver': fmt_sci, 'oracle': fmt_sci}))
    matched = float(oracle['matched'].mean()) if len(oracle) else 1.0
    within = bool(oracle['within'].all()) if len(oracle) else True
    console.print(f"matched {matched:.0%} of instances; never above oracle: {within}")

    bound = verify_bound(config, args.rounds, args.replicas, args.seed)
    console.print(_table("Mean gap vs bound", bound, {'gap': fmt_sci, 'bound': fmt_sci}))
    holds = bool(bound['holds'].all())
    console.print(f"bound holds at every round: {holds}")
    return EXIT_OK if within and holds else EXIT_RUN_ERROR


def cmd_emit(args, config: ExperimentConfig, console: Console) -> int:
    bundle = ResultBundle.load(args.bundle)
    paths = emit_plot_data(bundle, args.out or args.bundle)
    for path in paths:
        console.print(path)
    return EXIT_OK


COMMANDS = {
    'run': cmd_run,
    'sweep': cmd_sweep,
    'verify': cmd_verify,
    'emit': cmd_emit,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    console = Console()

    try:
        config = load_config(args.config, args.overrides)
    except ConfigError as e:
        log.error(f"configuration error: {e}")
        console.print(f"[red]Configuration error:[/red] {e}")
        return EXIT_CONFIG_ERROR

    settings = config.logging
    configure_logging(
        level=settings.level,
        log_dir=settings.log_dir,
        file_enabled=settings.file_enabled,
        json_enabled=settings.json_enabled,
    )
    if args.verbose:
        enable_debug()
    if args.quiet:
        disable_console()
    log_path = get_log_file_path()
    if log_path:
        log.debug(f"logging to {log_path}")

    try:
        return COMMANDS[args.command](args, config, console)
    except ConfigError as e:
        log.error(f"configuration error: {e}")
        console.print(f"[red]Configuration error:[/red] {e}")
        return EXIT_CONFIG_ERROR
    except Exception as e:
        log.error(f"{args.command} failed: {e}")
        log.debug("failure details", exc_info=True)
        console.print(f"[red]Error:[/red] {e}")
        return EXIT_RUN_ERROR


if __name__ == "__main__":
    sys.exit(main())
