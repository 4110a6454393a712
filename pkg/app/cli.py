"""CLI entrypoint for running experiments and reporting stored runs."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from app.config import ConfigError, configure_logging, load_config
from app.db import run_store_session
from app.schemas import RunListResponse
from app.services.experiment import ExperimentOutcome, run_batch, run_experiment
from app.services.run_store import list_runs, save_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    """
    Build the CLI argument parser.

    Returns:
        argparse.ArgumentParser: Configured CLI parser.
    """
    parser = argparse.ArgumentParser(
        prog="raabbvi", description="Adaptive-learning-rate black-box variational inference"
    )
    parser.add_argument(
        "--db-path",
        dest="db_path",
        default=None,
        help="Override SQLite run-store path (default: data/runs.db)",
    )
    parser.add_argument(
        "--log-level",
        dest="log_level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity",
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Run one configured experiment")
    run_parser.add_argument("config_path", help="key=value configuration file")
    run_parser.add_argument("--seed", type=int, default=None, help="Override the seed")
    run_parser.add_argument("--out", default=None, help="Output directory (default: config output)")
    run_parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Replace a configuration value (repeatable)",
    )

    batch_parser = subparsers.add_parser("batch", help="Run every *.cfg file in a directory")
    batch_parser.add_argument("config_dir", help="Directory of configuration files")
    batch_parser.add_argument("--out", default="runs", help="Batch output directory")
    batch_parser.add_argument("--workers", type=int, default=1, help="Parallel worker processes")
    batch_parser.add_argument("--seed", type=int, default=None, help="Override every seed")
    batch_parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Replace a configuration value in every file (repeatable)",
    )

    report_parser = subparsers.add_parser("report", help="List stored runs")
    report_parser.add_argument("--algorithm", default=None, help="Filter by algorithm")
    report_parser.add_argument("--config-name", dest="config_name", default=None, help="Filter by config name")
    report_parser.add_argument("--limit", type=int, default=None, help="Maximum rows")

    return parser


def store_outcomes(outcomes: Sequence[ExperimentOutcome], db_path: str | None = None) -> None:
    """
    Save experiment outcomes to the run store.

    Args:
        outcomes (Sequence[ExperimentOutcome]): Finished experiments.
        db_path (str | None): Optional database path override.
    """
    with run_store_session(db_path) as session:
        for outcome in outcomes:
            save_run(
                session,
                outcome.summary,
                outcome.epochs,
                output_dir=str(outcome.out_dir) if outcome.out_dir else None,
            )


def run_report(
    algorithm: Optional[str] = None,
    config_name: Optional[str] = None,
    limit: Optional[int] = None,
    db_path: str | None = None,
) -> RunListResponse:
    """
    List stored runs.

    Args:
        algorithm (Optional[str]): Filter by algorithm.
        config_name (Optional[str]): Filter by config name.
        limit (Optional[int]): Maximum rows.
        db_path (str | None): Optional database path override.

    Returns:
        RunListResponse: Report payload.
    """
    with run_store_session(db_path) as session:
        results = list_runs(session, algorithm=algorithm, config_name=config_name, limit=limit)
    return RunListResponse(total_runs=len(results), results=results)


def _run_command(args: argparse.Namespace) -> int:
    config_path = Path(args.config_path)
    config = load_config(config_path, args.override, seed=args.seed)
    out_dir = Path(args.out or config.output)
    outcome = run_experiment(config, out_dir, config_name=config_path.stem)
    store_outcomes([outcome], args.db_path)
    if outcome.message:
        print(outcome.message, file=sys.stderr)
    print(json.dumps(outcome.summary.model_dump(), indent=2))
    return EXIT_OK if outcome.exit_code == 0 else EXIT_NOT_CONVERGED


def _batch_command(args: argparse.Namespace) -> int:
    config_dir = Path(args.config_dir)
    paths = sorted(config_dir.glob("*.cfg"))
    if not paths:
        raise ConfigError("config_dir", f"no *.cfg files in {config_dir}")
    # Reason: load everything first so one bad file fails the batch before any run starts.
    configs = [(path.stem, load_config(path, args.override, seed=args.seed)) for path in paths]
    outcomes = run_batch(configs, Path(args.out), workers=args.workers)
    store_outcomes(outcomes, args.db_path)
    for outcome in outcomes:
        if outcome.message:
            print(f"{outcome.summary.config_name}: {outcome.message}", file=sys.stderr)
    response = RunListResponse(
        total_runs=len(outcomes), results=[outcome.summary for outcome in outcomes]
    )
    print(json.dumps(response.model_dump(), indent=2))
    return EXIT_OK if all(outcome.exit_code == 0 for outcome in outcomes) else EXIT_NOT_CONVERGED


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run the CLI tool.

    Args:
        argv (Optional[Sequence[str]]): Arguments, sys.argv[1:] when None.

    Returns:
        int: 0 on success, 1 when a run did not converge, 2 on config or IO errors.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        if args.command == "run":
            return _run_command(args)
        if args.command == "batch":
            return _batch_command(args)
        report = run_report(
            algorithm=args.algorithm,
            config_name=args.config_name,
            limit=args.limit,
            db_path=args.db_path,
        )
        print(json.dumps(report.model_dump(), indent=2))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
