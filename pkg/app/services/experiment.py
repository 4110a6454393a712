"""Experiment orchestration: one configured run, fixed-rate baselines and batches."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel

from app.schemas import BaselineRecord, EpochTraceRecord, RunConfig, SummaryRow
from app.services.faso import run_faso
from app.services.gradients import EstimatorError, elbo_gradient_oracle
from app.services.optimizers import (
    OptimizerError,
    OptimizerKind,
    descent_direction,
    init_optimizer_state,
    step,
)
from app.services.reporting import TraceWriter, accuracy_metrics, write_summary
from app.services.targets import (
    TargetModel,
    make_gaussian_target,
    make_synthetic_logistic_target,
    optimal_full_rank_approximation,
    optimal_mf_approximation,
)
from app.services.termination import (
    TerminationReason,
    detector_settings,
    optimizer_hyper,
    run_raabbvi,
)
from app.services.variational_family import (
    FULL_RANK,
    VariationalParams,
    initial_params,
    params_from_vector,
)

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.jsonl"
SUMMARY_FILE = "summary.csv"


@dataclass(frozen=True, eq=False)
class BaselineResult:
    """Fixed-learning-rate run evaluated on trailing-window iterate averages."""

    iterations: int
    final_params: VariationalParams
    records: list[BaselineRecord]
    message: str = ""


@dataclass(frozen=True, eq=False)
class ExperimentOutcome:
    """Exit status, summary row and epoch records of one experiment."""

    exit_code: int
    summary: SummaryRow
    epochs: list[EpochTraceRecord] = field(default_factory=list)
    message: str = ""
    out_dir: Optional[Path] = None


@dataclass
class _Accuracy:
    """Ground truth available for a target."""

    reference: Optional[VariationalParams]
    mean: Optional[np.ndarray]
    sd: Optional[np.ndarray]

    def of(self, params: VariationalParams) -> dict[str, Optional[float]]:
        return accuracy_metrics(params, self.reference, self.mean, self.sd)


def build_target(config: RunConfig, rng: np.random.Generator) -> TargetModel:
    """
    Build the configured target distribution.

    Args:
        config (RunConfig): Run configuration.
        rng (np.random.Generator): Random stream for simulated data.

    Returns:
        TargetModel: Target distribution.
    """
    if config.target == "gaussian":
        return make_gaussian_target(config.target_spec())
    return make_synthetic_logistic_target(config.n_obs, config.dim, config.prior_scale, rng)


def _ground_truth(config: RunConfig, target: TargetModel) -> _Accuracy:
    """
    Optimal approximation q* for Gaussian targets plus analytic moments when known.
    """
    reference = None
    if config.target == "gaussian":
        spec = config.target_spec()
        reference = (
            optimal_full_rank_approximation(spec)
            if config.family == FULL_RANK
            else optimal_mf_approximation(spec)
        )
    return _Accuracy(reference=reference, mean=target.mean, sd=target.sd)


def _evaluation_points(k_max: int, eval_every: int, window_fraction: float) -> list[tuple[int, int]]:
    """
    (step, window) pairs at every eval_every steps and at the final step.
    """
    steps = list(range(eval_every, k_max + 1, eval_every))
    if not steps or steps[-1] != k_max:
        steps.append(k_max)
    return [(k, max(1, math.ceil(window_fraction * k))) for k in steps]


def run_fixed_lr_baseline(
    config: RunConfig,
    target: TargetModel,
    rng: np.random.Generator,
    reference: Optional[VariationalParams] = None,
    trace: TraceWriter | None = None,
) -> BaselineResult:
    """
    Optimize at config.fixed_gamma for k_max steps and score trailing-window averages.

    Only the running sums at window starts are kept, so memory is independent of k_max.

    Args:
        config (RunConfig): Run configuration.
        target (TargetModel): Target distribution.
        rng (np.random.Generator): Random stream for gradients.
        reference (Optional[VariationalParams]): Optimal approximation, when known.
        trace (TraceWriter | None): Receives one baseline record per evaluation.

    Returns:
        BaselineResult: Final average and the evaluation records.
    """
    family = config.family
    dim = target.dim
    accuracy = _Accuracy(reference=reference, mean=target.mean, sd=target.sd)
    oracle = elbo_gradient_oracle(target, family, config.num_samples, rng)
    current = initial_params(family, dim).to_vector()
    state = init_optimizer_state(config.optimizer, current.size, optimizer_hyper(config))

    points = _evaluation_points(config.k_max, config.eval_every, config.window_fraction)
    starts = {k - window for k, window in points}
    snapshots: dict[int, np.ndarray] = {}
    if 0 in starts:
        snapshots[0] = np.zeros_like(current)
    running = np.zeros_like(current)
    records: list[BaselineRecord] = []
    final = params_from_vector(family, current, dim)
    point_index = 0
    message = ""

    for k in range(1, config.k_max + 1):
        try:
            grad = oracle(current)
            params = (
                params_from_vector(family, current, dim)
                if state.kind is OptimizerKind.NGD
                else None
            )
            direction, state = descent_direction(state, grad, params)
            current = step(current, direction, config.fixed_gamma)
            if not np.all(np.isfinite(current)):
                raise OptimizerError(f"non-finite iterate at step {k}")
        except (OptimizerError, EstimatorError) as exc:
            message = f"baseline aborted at step {k}: {exc}"
            logger.warning(message)
            return BaselineResult(iterations=k - 1, final_params=final, records=records, message=message)
        running = running + current
        if k in starts:
            snapshots[k] = running.copy()
        while point_index < len(points) and points[point_index][0] == k:
            _, window = points[point_index]
            final = params_from_vector(family, (running - snapshots[k - window]) / window, dim)
            record = BaselineRecord(step=k, window=window, **accuracy.of(final))
            records.append(record)
            if trace is not None:
                trace(record)
            point_index += 1
    return BaselineResult(iterations=config.k_max, final_params=final, records=records, message=message)


def _summary_row(
    config: RunConfig,
    config_name: str,
    terminal_step: int,
    metrics: dict[str, Optional[float]],
    success: bool,
    reason: str,
    wall_time: float,
) -> SummaryRow:
    return SummaryRow(
        config_name=config_name,
        algorithm=config.algorithm,
        target=config.target,
        structure=config.structure if config.target == "gaussian" else "",
        dim=config.dim,
        seed=config.seed,
        terminal_step=terminal_step,
        success=success,
        terminated_reason=reason,
        wall_time=wall_time,
        **metrics,
    )


class _EpochCollector:
    """Forward records to the trace and keep the epoch records."""

    def __init__(self, writer: TraceWriter) -> None:
        self.writer = writer
        self.epochs: list[EpochTraceRecord] = []

    def __call__(self, record: BaseModel) -> None:
        if isinstance(record, EpochTraceRecord):
            self.epochs.append(record)
        self.writer.write(record)


def run_experiment(config: RunConfig, out_dir: Path, config_name: str = "run") -> ExperimentOutcome:
    """
    Run one configured experiment and write its trace and summary.

    Args:
        config (RunConfig): Run configuration.
        out_dir (Path): Directory receiving trace.jsonl and summary.csv.
        config_name (str): Name recorded in the summary row.

    Returns:
        ExperimentOutcome: Exit code 0 on success, 1 on non-convergence.

    Raises:
        OSError: When the output files cannot be written.
    """
    out_dir = Path(out_dir)
    started = time.perf_counter()
    data_rng, run_rng = np.random.default_rng(config.seed).spawn(2)
    target = build_target(config, data_rng)
    truth = _ground_truth(config, target)
    logger.info("running %s (%s on %s, seed %d)", config_name, config.algorithm, target.name, config.seed)

    with TraceWriter(out_dir / TRACE_FILE) as writer:
        collector = _EpochCollector(writer)
        if config.algorithm == "raabbvi":
            result = run_raabbvi(config, target, run_rng, trace=collector)
            params = result.final_params
            terminal_step = result.total_iterations
            success = result.success
            reason = result.terminated_reason.value
            message = result.warning or ""
        elif config.algorithm == "faso":
            faso = run_faso(
                initial_params(config.family, target.dim).to_vector(),
                config.fixed_gamma,
                config.w_min,
                config.epsilon_for_epoch(0),
                config.k_max,
                elbo_gradient_oracle(target, config.family, config.num_samples, run_rng),
                family=config.family,
                optimizer=config.optimizer,
                hyper=optimizer_hyper(config),
                detector=detector_settings(config),
                num_samples=config.num_samples,
                cost_model=config.cost_model,
                on_check=collector,
            )
            params = params_from_vector(config.family, faso.iterate_average, target.dim)
            terminal_step = faso.iterations_used
            success = faso.success
            if faso.success:
                reason, message = "converged", ""
            else:
                reason = (
                    TerminationReason.OPTIMIZER_ERROR.value
                    if faso.failure_step is not None
                    else TerminationReason.MAX_ITERATIONS.value
                )
                error = "unknown" if faso.estimated_error is None else f"{faso.estimated_error:.4g}"
                message = f"Warning: failed to converge. Estimated error is {error}"
        else:
            baseline = run_fixed_lr_baseline(
                config, target, run_rng, reference=truth.reference, trace=writer
            )
            params = baseline.final_params
            terminal_step = baseline.iterations
            success = not baseline.message
            reason = (
                TerminationReason.MAX_ITERATIONS.value
                if success
                else TerminationReason.OPTIMIZER_ERROR.value
            )
            message = baseline.message

    row = _summary_row(
        config,
        config_name,
        terminal_step,
        truth.of(params),
        success,
        reason,
        time.perf_counter() - started,
    )
    write_summary(out_dir / SUMMARY_FILE, [row])
    if message:
        logger.warning("%s: %s", config_name, message)
    return ExperimentOutcome(
        exit_code=0 if success else 1,
        summary=row,
        epochs=collector.epochs,
        message=message,
        out_dir=out_dir,
    )


def _run_named(job: tuple[RunConfig, str, str]) -> ExperimentOutcome:
    config, out_dir, name = job
    return run_experiment(config, Path(out_dir), config_name=name)


def run_batch(
    configs: Sequence[tuple[str, RunConfig]], out_dir: Path, workers: int = 1
) -> list[ExperimentOutcome]:
    """
    Run independent experiments, each in its own subdirectory, and write a combined summary.

    Args:
        configs (Sequence[tuple[str, RunConfig]]): (name, config) pairs.
        out_dir (Path): Batch output directory.
        workers (int): Worker processes; 1 runs in-process.

    Returns:
        list[ExperimentOutcome]: Outcomes in input order.
    """
    out_dir = Path(out_dir)
    jobs = [(config, str(out_dir / name), name) for name, config in configs]
    if workers <= 1:
        outcomes = [_run_named(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(_run_named, jobs))
    write_summary(out_dir / SUMMARY_FILE, [outcome.summary for outcome in outcomes])
    return outcomes
