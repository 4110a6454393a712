"""Fixed-learning-rate optimization with convergence detection and iterate averaging."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from app.schemas import CheckRecord
from app.services.diagnostics import (
    DiagnosticsReport,
    IterateHistory,
    diagnostics_report,
    distance_based_converged,
    rhat_max_window_search,
    sasa_plus_converged,
)
from app.services.gradients import EstimatorError, GradientOracle
from app.services.optimizers import (
    OptimizerError,
    OptimizerHyper,
    OptimizerKind,
    descent_direction,
    init_optimizer_state,
    step,
)
from app.services.variational_family import MEAN_FIELD, MeanFieldGaussianParams

logger = logging.getLogger(__name__)

MIN_ESS = 50
R_HAT_CLAMP = 1e3
TRAILING_FRACTION = 0.2

CheckCallback = Callable[[CheckRecord], None]


@dataclass(frozen=True)
class DetectorSettings:
    """Which stationarity detector to run and its tuning."""

    kind: str = "rhat"
    sasa_alpha: float = 0.05
    sasa_min_ess: int = 100
    sasa_multivariate: bool = False
    distance_q: float = 2.0
    distance_thresh: float = 0.5


@dataclass(frozen=True)
class RecheckSchedule:
    """MCSE recheck growth driven by the optimization-to-check cost ratio r."""

    r: float
    next_window: int

    def __post_init__(self) -> None:
        if self.r < 0:
            raise ValueError(f"r must be nonnegative, got {self.r}")
        if self.next_window < 1:
            raise ValueError(f"next_window must be positive, got {self.next_window}")

    @property
    def chi(self) -> float:
        return chi_of_r(self.r)

    def grow(self, window: int) -> RecheckSchedule:
        """
        Schedule after a failed check on `window` iterates.

        Args:
            window (int): Window that was just checked.

        Returns:
            RecheckSchedule: Schedule with next_window = ceil(chi * window) > window.
        """
        return RecheckSchedule(r=self.r, next_window=max(math.ceil(self.chi * window), window + 1))


@dataclass(frozen=True, eq=False)
class FasoResult:
    """Outcome of one fixed-learning-rate epoch."""

    iterations_used: int
    iterate_average: np.ndarray
    success: bool
    k_conv: Optional[int]
    final_window: int
    diagnostics_trace: list[DiagnosticsReport] = field(default_factory=list)
    failure_step: Optional[int] = None
    message: str = ""
    estimated_error: Optional[float] = None


def chi_of_r(r: float) -> float:
    """
    Window growth factor 1 + (1 + r)^(-1/2).

    Args:
        r (float): Cost ratio C_O / C_E, nonnegative.

    Returns:
        float: Growth factor in (1, 2].
    """
    if r < 0:
        raise ValueError(f"r must be nonnegative, got {r}")
    return 1.0 + 1.0 / math.sqrt(1.0 + r)


def g_of_r(r: float) -> float:
    """
    Worst-case cost of the chi(r) recheck schedule relative to the optimal one.

    Equals 4 at r = 0 (the doubling rule) and decreases to 1 as r grows.

    Args:
        r (float): Cost ratio C_O / C_E, nonnegative.

    Returns:
        float: (2 + r + 2 sqrt(1 + r)) / (1 + r).
    """
    if r < 0:
        raise ValueError(f"r must be nonnegative, got {r}")
    return (2.0 + r + 2.0 * math.sqrt(1.0 + r)) / (1.0 + r)


def schedule_cost(w_conv: float, w_opt: float, r: float) -> tuple[float, float]:
    """
    Simulate the cost of checking at windows chi^j W_conv until W_opt is reached.

    Costs are in units of C_E: a check over W iterates costs W and W iterations
    of optimization cost r W.

    Args:
        w_conv (float): Window at which stationarity was detected.
        w_opt (float): Smallest window that passes the MCSE check, >= w_conv.
        r (float): Cost ratio C_O / C_E.

    Returns:
        tuple[float, float]: (cost of the schedule, cost of the optimal schedule).
    """
    if w_conv <= 0 or w_opt < w_conv:
        raise ValueError(f"need 0 < w_conv <= w_opt, got {w_conv}, {w_opt}")
    chi = chi_of_r(r)
    window = w_conv
    check_cost = w_conv
    while window < w_opt:
        window *= chi
        check_cost += window
    optimal = r * w_opt + w_conv + w_opt
    return r * window + check_cost, optimal


def mean_field_relative_errors(
    tau_hat: np.ndarray, psi_hat: np.ndarray, tau_bar: np.ndarray, psi_bar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Relative errors |sigma_hat - sigma_bar| / sigma_bar and |tau_hat - tau_bar| / sigma_bar.
    """
    sigma_bar = np.exp(psi_bar)
    sd_error = np.abs(np.exp(psi_hat) - sigma_bar) / sigma_bar
    mean_error = np.abs(tau_hat - tau_bar) / sigma_bar
    return sd_error, mean_error


def satisfies_mcse_hypothesis(
    tau_hat: np.ndarray,
    psi_hat: np.ndarray,
    tau_bar: np.ndarray,
    psi_bar: np.ndarray,
    epsilon: float,
) -> bool:
    """
    Whether |tau_hat - tau_bar| <= eps sigma_hat and |psi_hat - psi_bar| <= eps hold.

    When they do and eps < 1/2, the sd error is at most 1.5 eps and the mean
    error at most 1.75 eps, both relative to sigma_bar.
    """
    sigma_hat = np.exp(psi_hat)
    return bool(
        np.all(np.abs(tau_hat - tau_bar) <= epsilon * sigma_hat)
        and np.all(np.abs(psi_hat - psi_bar) <= epsilon)
    )


def mcse_gate(
    window: np.ndarray, family: str, epsilon: float, min_ess: int = MIN_ESS
) -> tuple[bool, float, float, DiagnosticsReport]:
    """
    Accept the iterate average when its relative MCSE is below epsilon.

    For the mean-field family the tau errors are scaled by exp(psi_bar) of the
    window average and both halves must pass separately.

    Args:
        window (np.ndarray): Iterates of shape (W, m).
        family (str): Variational family, or any other name for generic vectors.
        epsilon (float): Relative error threshold.
        min_ess (int): Smallest acceptable per-dimension ESS.

    Returns:
        tuple[bool, float, float, DiagnosticsReport]: (passed, mean relative MCSE,
            minimum ESS, full report).
    """
    report = diagnostics_report(window)
    if family == MEAN_FIELD:
        d = window.shape[1] // 2
        psi_bar = window[:, d:].mean(axis=0)
        tau_part = float(np.mean(report.mcse[:d] / np.exp(psi_bar)))
        psi_part = float(np.mean(report.mcse[d:]))
        mean_relative = max(tau_part, psi_part)
    else:
        mean_relative = float(np.mean(report.mcse))
    ess_min = report.ess_min
    passed = mean_relative < epsilon and ess_min >= min_ess
    return passed, mean_relative, ess_min, report


def op_count_ratio(num_samples: int, window: int) -> float:
    """
    Deterministic estimate of C_O / C_E.

    One iteration evaluates the target M times; the check spends about
    log2(2W) operations per iterate on the FFT autocovariance.
    """
    return num_samples / math.ceil(math.log2(2 * window))


def _trailing_average(history: IterateHistory, window: int) -> np.ndarray:
    return history.tail(window).mean(axis=0)


def _detect(
    detector: DetectorSettings,
    history: IterateHistory,
    directions: IterateHistory,
    initial: np.ndarray,
    gamma: float,
    w_min: int,
) -> tuple[bool, Optional[int], Optional[float]]:
    """
    Run the configured stationarity detector.

    Returns:
        tuple[bool, Optional[int], Optional[float]]: (converged, window, rhat_max).
    """
    k = len(history)
    if detector.kind == "rhat":
        search = rhat_max_window_search(history, w_min)
        if search is None:
            return False, None, None
        return search.converged, search.window, search.rhat_max
    if detector.kind == "sasa_plus":
        iterates = history.as_array()
        pre_step = np.vstack([initial[None, :], iterates[:-1]])
        converged = sasa_plus_converged(
            pre_step,
            directions.as_array(),
            gamma,
            alpha=detector.sasa_alpha,
            min_ess=detector.sasa_min_ess,
            multivariate=detector.sasa_multivariate,
        )
        return converged, min(w_min, k), None
    if detector.kind == "distance":
        converged = distance_based_converged(
            history, initial, q=detector.distance_q, thresh=detector.distance_thresh
        )
        return converged, min(w_min, k), None
    raise ValueError(f"unknown detector: {detector.kind}")


def run_faso(
    initial: np.ndarray,
    gamma: float,
    w_min: int,
    epsilon: float,
    k_max: int,
    oracle: GradientOracle,
    *,
    family: str = MEAN_FIELD,
    optimizer: OptimizerKind | str = OptimizerKind.AVG_ADAM,
    hyper: OptimizerHyper | None = None,
    detector: DetectorSettings | None = None,
    num_samples: int = 10,
    cost_model: str = "op_count",
    epoch: int = 0,
    epoch_start_step: int = 0,
    on_check: CheckCallback | None = None,
) -> FasoResult:
    """
    Optimize at a fixed learning rate until the iterate average is accurate.

    Args:
        initial (np.ndarray): Starting parameter vector lambda_0.
        gamma (float): Fixed learning rate.
        w_min (int): Minimum convergence window, >= 8.
        epsilon (float): Relative MCSE threshold.
        k_max (int): Iteration budget for this epoch.
        oracle (GradientOracle): Stochastic gradient of the objective.
        family (str): Variational family of the vector layout.
        optimizer (OptimizerKind | str): Descent-direction engine.
        hyper (OptimizerHyper | None): Optimizer hyperparameters.
        detector (DetectorSettings | None): Stationarity detector, R-hat by default.
        num_samples (int): Gradient draws per step, used by the op-count cost model.
        cost_model (str): "op_count" or "wall_clock" estimate of r.
        epoch (int): Epoch index written into check records.
        epoch_start_step (int): Global step of the first iterate of this epoch.
        on_check (CheckCallback | None): Receives one record per check.

    Returns:
        FasoResult: Iterate average, iterations used and diagnostics.

    Raises:
        ValueError: On invalid arguments.
    """
    if gamma <= 0 or epsilon <= 0:
        raise ValueError(f"gamma and epsilon must be positive, got {gamma}, {epsilon}")
    if w_min < 8:
        raise ValueError(f"w_min must be at least 8, got {w_min}")
    if k_max < 1:
        raise ValueError(f"k_max must be positive, got {k_max}")
    if cost_model not in {"op_count", "wall_clock"}:
        raise ValueError(f"unknown cost model: {cost_model}")

    detector = detector or DetectorSettings()
    optimizer = OptimizerKind(optimizer)
    current = np.asarray(initial, dtype=float).copy()
    initial = current.copy()
    state = init_optimizer_state(optimizer, current.size, hyper)
    history = IterateHistory(current.size, epoch_start_step=epoch_start_step)
    directions = IterateHistory(current.size, epoch_start_step=epoch_start_step)
    keep_directions = detector.kind == "sasa_plus"
    check_every = max(1, w_min // 2)

    k_conv: Optional[int] = None
    w_check = 0
    schedule: Optional[RecheckSchedule] = None
    last_error: Optional[float] = None
    trace: list[DiagnosticsReport] = []
    optimize_seconds = 0.0

    def emit(**fields: object) -> None:
        if on_check is not None:
            on_check(CheckRecord(epoch=epoch, step=epoch_start_step + len(history), **fields))

    for k in range(1, k_max + 1):
        started = time.perf_counter()
        try:
            grad = oracle(current)
            params = (
                MeanFieldGaussianParams.from_vector(current)
                if optimizer is OptimizerKind.NGD and family == MEAN_FIELD
                else None
            )
            direction, state = descent_direction(state, grad, params)
            updated = step(current, direction, gamma)
            if not np.all(np.isfinite(updated)):
                raise OptimizerError(f"non-finite iterate at step {k}")
        except (OptimizerError, EstimatorError) as exc:
            logger.warning("epoch %d aborted at step %d: %s", epoch, k, exc)
            window = max(1, min(len(history), w_check or len(history)))
            average = _trailing_average(history, window) if len(history) else initial
            return FasoResult(
                iterations_used=k - 1,
                iterate_average=average,
                success=False,
                k_conv=k_conv,
                final_window=window if len(history) else 0,
                diagnostics_trace=trace,
                failure_step=epoch_start_step + k,
                message=str(exc),
                estimated_error=last_error,
            )
        optimize_seconds += time.perf_counter() - started
        if keep_directions:
            directions.append(direction)
        current = updated
        history.append(current)

        if k_conv is None and k % check_every == 0 and k >= w_min / 0.95:
            converged, window, rhat_max = _detect(
                detector, history, directions, initial, gamma, w_min
            )
            logger.debug(
                "epoch %d step %d: rhat_max=%s window=%s converged=%s",
                epoch, k, rhat_max, window, converged,
            )
            emit(phase="convergence", rhat_max=rhat_max, W_opt=window, passed=converged)
            if converged and window is not None:
                k_conv = k - window
                w_check = window
                logger.info("epoch %d: stationarity at step %d with window %d", epoch, k, window)

        if k_conv is not None and k - k_conv >= w_check:
            window = min(w_check, math.floor(0.95 * k))
            check_started = time.perf_counter()
            passed, mean_mcse, ess_min, report = mcse_gate(
                history.tail(window), family, epsilon
            )
            check_seconds = time.perf_counter() - check_started
            trace.append(report)
            last_error = mean_mcse
            logger.debug(
                "epoch %d step %d: mean MCSE %.4g, ESS min %.1f over %d iterates",
                epoch, k, mean_mcse, ess_min, window,
            )
            emit(
                phase="mcse",
                W_opt=window,
                mean_mcse=mean_mcse,
                ess_min=ess_min,
                passed=passed,
            )
            if passed:
                return FasoResult(
                    iterations_used=k,
                    iterate_average=_trailing_average(history, window),
                    success=True,
                    k_conv=k_conv,
                    final_window=window,
                    diagnostics_trace=trace,
                    estimated_error=mean_mcse,
                )
            if schedule is None:
                if cost_model == "op_count":
                    r = op_count_ratio(num_samples, window)
                else:
                    r = (optimize_seconds / k) / max(check_seconds / window, 1e-12)
                schedule = RecheckSchedule(r=min(max(r, 0.0), R_HAT_CLAMP), next_window=window)
                logger.debug("epoch %d: r=%.3g, chi=%.3f", epoch, schedule.r, schedule.chi)
            schedule = schedule.grow(w_check)
            w_check = schedule.next_window

    if k_conv is not None:
        window = min(w_check, len(history))
    else:
        window = max(1, math.ceil(TRAILING_FRACTION * len(history)))
    return FasoResult(
        iterations_used=k_max,
        iterate_average=_trailing_average(history, window),
        success=False,
        k_conv=k_conv,
        final_window=window,
        diagnostics_trace=trace,
        message=f"no accurate iterate average within {k_max} iterations",
        estimated_error=last_error,
    )
