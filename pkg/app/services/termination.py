"""Inefficiency-based termination and the adaptive learning-rate outer loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel

from app.schemas import EpochTraceRecord, RunConfig
from app.services.faso import DetectorSettings, FasoResult, run_faso
from app.services.gradients import elbo_gradient_oracle
from app.services.optimizers import OptimizerHyper, OptimizerKind
from app.services.regression import (
    RegressionFitError,
    SklRegressionFit,
    fit_iteration_regression,
    fit_skl_regression,
    predict_next_K,
)
from app.services.targets import TargetModel
from app.services.variational_family import (
    MEAN_FIELD,
    VariationalParams,
    initial_params,
    params_from_vector,
    skl,
)

logger = logging.getLogger(__name__)

TraceSink = Callable[[BaseModel], None]

KAPPA_ONE_OPTIMIZERS = {OptimizerKind.AVG_ADAM, OptimizerKind.AVG_RMSPROP, OptimizerKind.SGD}


class TerminationReason(str, Enum):
    """Why the outer loop stopped."""

    INEFFICIENCY = "inefficiency"
    MAX_ITERATIONS = "max_iterations"
    OPTIMIZER_ERROR = "optimizer_error"
    FIT_ERROR = "fit_error"


@dataclass(frozen=True, eq=False)
class EpochRecord:
    """One completed learning-rate epoch."""

    t: int
    gamma_t: float
    K_t: int
    delta_t: Optional[float]
    average_params: VariationalParams


@dataclass(frozen=True)
class TerminationDecision:
    """Estimated inefficiency of running one more epoch."""

    rskl_hat: float
    ri_hat: float
    inefficiency_hat: float
    terminate: bool
    predicted_K_next: float


@dataclass(frozen=True, eq=False)
class RaabbviResult:
    """Final approximation and the per-epoch history of a run."""

    final_params: VariationalParams
    epoch_records: list[EpochRecord]
    decision_trace: list[TerminationDecision]
    terminated_reason: TerminationReason
    total_iterations: int
    warning: Optional[str] = None
    fits: list[SklRegressionFit] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.terminated_reason is TerminationReason.INEFFICIENCY


def estimate_rskl(fit: SklRegressionFit, gamma_t: float, rho: float, xi: float) -> float:
    """
    Relative SKL of the next epoch: rho^kappa + xi / (C^(1/2) gamma_t^kappa).

    Args:
        fit (SklRegressionFit): SKL regression fit.
        gamma_t (float): Current learning rate.
        rho (float): Learning-rate decay factor.
        xi (float): Accuracy threshold.

    Returns:
        float: Estimated relative SKL.
    """
    kappa = fit.kappa_mean
    c_hat = math.exp(fit.log_C_mean)
    return rho**kappa + xi / (math.sqrt(c_hat) * gamma_t**kappa)


def decide_termination(
    rskl_hat: float, K_curr: float, predicted_K_next: float, K0: float, tau: float
) -> TerminationDecision:
    """
    Terminate when RSKL times the relative iteration increase exceeds tau.

    Args:
        rskl_hat (float): Estimated relative SKL.
        K_curr (float): Iterations used at the current learning rate.
        predicted_K_next (float): Predicted iterations at the next rate.
        K0 (float): Expected iterations to convergence.
        tau (float): Inefficiency threshold, may be infinite.

    Returns:
        TerminationDecision: Estimates and the decision.
    """
    if K_curr < 0 or K0 < 0 or K_curr + K0 == 0:
        raise ValueError(f"need K_curr, K0 >= 0 and not both zero, got {K_curr}, {K0}")
    ri_hat = predicted_K_next / (K_curr + K0)
    inefficiency = rskl_hat * ri_hat
    return TerminationDecision(
        rskl_hat=rskl_hat,
        ri_hat=ri_hat,
        inefficiency_hat=inefficiency,
        terminate=inefficiency > tau,
        predicted_K_next=predicted_K_next,
    )


def kappa_is_fixed(config: RunConfig) -> bool:
    """
    Kappa = 1 for SGD and the averaged adaptive optimizers on the mean-field family.
    """
    return config.optimizer in KAPPA_ONE_OPTIMIZERS and config.family == MEAN_FIELD


def detector_settings(config: RunConfig) -> DetectorSettings:
    return DetectorSettings(
        kind=config.detector,
        sasa_alpha=config.sasa_alpha,
        sasa_min_ess=config.sasa_min_ess,
        distance_q=config.distance_q,
        distance_thresh=config.distance_thresh,
    )


def optimizer_hyper(config: RunConfig) -> OptimizerHyper:
    return OptimizerHyper(
        beta=config.beta,
        beta1=config.beta1,
        beta2=config.beta2,
        eps_num=config.eps_num,
        window=config.adagrad_window,
    )


def _failure_warning(result: FasoResult) -> str:
    error = "unknown" if result.estimated_error is None else f"{result.estimated_error:.4g}"
    return f"Warning: failed to converge. Estimated error is {error}"


def run_raabbvi(
    config: RunConfig,
    target: TargetModel,
    rng: np.random.Generator,
    trace: TraceSink | None = None,
) -> RaabbviResult:
    """
    Run fixed-learning-rate epochs with a decreasing rate until further epochs are inefficient.

    Args:
        config (RunConfig): Run configuration.
        target (TargetModel): Target distribution.
        rng (np.random.Generator): Random stream for gradients and regression sampling.
        trace (TraceSink | None): Receives check and epoch records.

    Returns:
        RaabbviResult: Final approximation, epoch history and stop reason.
    """
    family = config.family
    dim = target.dim
    oracle = elbo_gradient_oracle(target, family, config.num_samples, rng)
    hyper = optimizer_hyper(config)
    detector = detector_settings(config)
    fixed_kappa = kappa_is_fixed(config)

    current = initial_params(family, dim).to_vector()
    gamma = config.gamma0
    k_total = 0
    t = 0
    records: list[EpochRecord] = []
    decisions: list[TerminationDecision] = []
    fits: list[SklRegressionFit] = []
    reason = TerminationReason.MAX_ITERATIONS
    warning: Optional[str] = None

    while k_total < config.k_max:
        previous = current
        optimizer = (
            OptimizerKind.RMSPROP if config.warm_start and t == 0 else config.optimizer
        )
        logger.info("epoch %d: gamma=%.4g optimizer=%s", t, gamma, optimizer.value)
        result = run_faso(
            previous,
            gamma,
            config.w_min,
            config.epsilon_for_epoch(t),
            config.k_max - k_total,
            oracle,
            family=family,
            optimizer=optimizer,
            hyper=hyper,
            detector=detector,
            num_samples=config.num_samples,
            cost_model=config.cost_model,
            epoch=t,
            epoch_start_step=k_total,
            on_check=trace,
        )
        k_total += result.iterations_used
        if not result.success:
            warning = _failure_warning(result)
            logger.warning(warning)
            if result.failure_step is not None:
                reason = TerminationReason.OPTIMIZER_ERROR
            else:
                reason = TerminationReason.MAX_ITERATIONS
                current = result.iterate_average
            break

        current = result.iterate_average
        K_t = result.iterations_used
        average = params_from_vector(family, current, dim)
        delta = None
        epoch_trace = EpochTraceRecord(t=t, gamma=gamma, K_t=K_t)
        if t >= 1:
            delta = skl(params_from_vector(family, previous, dim), average)
            epoch_trace.delta_t = delta
        records.append(
            EpochRecord(t=t, gamma_t=gamma, K_t=K_t, delta_t=delta, average_params=average)
        )

        decision: Optional[TerminationDecision] = None
        if t >= 1:
            later = [record for record in records if record.t >= 1]
            gammas = [record.gamma_t for record in later]
            try:
                fit = fit_skl_regression(
                    gammas,
                    [record.delta_t for record in later],
                    config.rho,
                    fixed_kappa,
                    rng,
                    n_chains=config.sampler_chains,
                    n_draws=config.sampler_draws,
                )
                fits.append(fit)
                rskl = estimate_rskl(fit, gamma, config.rho, config.xi)
                epoch_trace.log_C_mean = fit.log_C_mean
                epoch_trace.kappa_mean = fit.kappa_mean
                epoch_trace.rskl_hat = rskl
                if t >= 2:
                    alpha, beta = fit_iteration_regression(
                        gammas, [record.K_t for record in later]
                    )
                    predicted = predict_next_K(alpha, beta, config.rho * gamma, K_t)
                    decision = decide_termination(rskl, K_t, predicted, config.k0, config.tau)
                    decisions.append(decision)
                    epoch_trace.ri_hat = decision.ri_hat
                    epoch_trace.inefficiency_hat = decision.inefficiency_hat
                    epoch_trace.terminated = decision.terminate
            except RegressionFitError as exc:
                warning = f"regression fit failed at epoch {t}: {exc}"
                logger.warning(warning)
                reason = TerminationReason.FIT_ERROR
                if trace is not None:
                    trace(epoch_trace)
                break

        if trace is not None:
            trace(epoch_trace)
        if decision is not None:
            logger.info(
                "epoch %d: RSKL=%.3f RI=%.3f inefficiency=%.3f",
                t, decision.rskl_hat, decision.ri_hat, decision.inefficiency_hat,
            )
            if decision.terminate:
                reason = TerminationReason.INEFFICIENCY
                break

        gamma *= config.rho
        t += 1

    if reason is TerminationReason.MAX_ITERATIONS and warning is None:
        warning = f"Warning: iteration budget of {config.k_max} exhausted"
        logger.warning(warning)
    return RaabbviResult(
        final_params=params_from_vector(family, current, dim),
        epoch_records=records,
        decision_trace=decisions,
        terminated_reason=reason,
        total_iterations=k_total,
        warning=warning,
        fits=fits,
    )
