"""Weighted regressions over epochs: SKL decay and iterations to convergence."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.linalg import LinAlgError, cholesky
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit

from app.services.diagnostics import split_rhat_columns

logger = logging.getLogger(__name__)

PRIOR_SCALE = 10.0
TARGET_ACCEPTANCE = 0.25
RHAT_GATE = 1.05
KAPPA_BOUNDS = (1e-3, 1.0)


class RegressionFitError(ValueError):
    """Raised when a regression cannot be fit to the epoch records."""


@dataclass(frozen=True, eq=False)
class SklRegressionFit:
    """Posterior summary of log delta_t = log C + 2 log(rho^-kappa - 1) + 2 kappa log gamma_t + eta_t."""

    log_C_mean: float
    kappa_mean: float
    sigma_mean: float
    posterior_draws: np.ndarray
    fixed_kappa: bool
    used_fallback: bool = False


def regression_weights(T: int) -> np.ndarray:
    """
    Down-weight early epochs: w_t = (1 + (T - t)^2 / 9)^(-1/4) for t = 1..T.

    Args:
        T (int): Number of epochs in the regression.

    Returns:
        np.ndarray: Weights, the last one equal to 1.
    """
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    lag = T - np.arange(1, T + 1, dtype=float)
    return (1.0 + lag**2 / 9.0) ** -0.25


def _kappa_offset(kappa: np.ndarray, rho: float) -> np.ndarray:
    # 2 log(rho^-kappa - 1), with expm1 for kappa near zero
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(np.expm1(-kappa * np.log(rho)))


def _profile_log_c(
    kappa: float, log_gamma: np.ndarray, log_delta: np.ndarray, weights: np.ndarray, rho: float
) -> tuple[float, float]:
    """Weighted least-squares log C and residual sum of squares at a given kappa."""
    offset = _kappa_offset(np.asarray(kappa), rho) + 2.0 * kappa * log_gamma
    residual = log_delta - offset
    log_c = float(np.sum(weights * residual) / np.sum(weights))
    ssr = float(np.sum(weights * (residual - log_c) ** 2))
    return log_c, ssr


def _least_squares_estimate(
    log_gamma: np.ndarray,
    log_delta: np.ndarray,
    weights: np.ndarray,
    rho: float,
    fixed_kappa: bool,
    sigma_floor: float,
) -> tuple[float, float, float]:
    """
    Weighted least-squares point estimates (log C, kappa, sigma).

    Kappa is profiled over [1e-3, 1] when free.
    """
    if fixed_kappa:
        kappa = 1.0
    else:
        result = minimize_scalar(
            lambda value: _profile_log_c(value, log_gamma, log_delta, weights, rho)[1],
            bounds=KAPPA_BOUNDS,
            method="bounded",
            options={"xatol": 1e-10},
        )
        kappa = float(result.x)
    log_c, ssr = _profile_log_c(kappa, log_gamma, log_delta, weights, rho)
    sigma = max(float(np.sqrt(ssr / np.sum(weights))), sigma_floor)
    return log_c, kappa, sigma


class _SklPosterior:
    """
    Log posterior over unconstrained (log C, [logit kappa,] s) with sigma = floor + e^s.

    Evaluated for a batch of chains at once.
    """

    def __init__(
        self,
        log_gamma: np.ndarray,
        log_delta: np.ndarray,
        weights: np.ndarray,
        rho: float,
        fixed_kappa: bool,
        sigma_floor: float,
    ) -> None:
        self.log_gamma = log_gamma
        self.log_delta = log_delta
        self.weights = weights
        self.rho = rho
        self.fixed_kappa = fixed_kappa
        self.sigma_floor = sigma_floor
        self.size = 2 if fixed_kappa else 3

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        log_c = theta[:, 0]
        kappa = np.ones(theta.shape[0]) if self.fixed_kappa else expit(theta[:, 1])
        sigma = self.sigma_floor + np.exp(theta[:, -1])
        return log_c, kappa, sigma

    def pack(self, log_c: float, kappa: float, sigma: float) -> np.ndarray:
        s = np.log(max(sigma - self.sigma_floor, self.sigma_floor))
        if self.fixed_kappa:
            return np.array([log_c, s])
        return np.array([log_c, float(logit(np.clip(kappa, 1e-6, 1.0 - 1e-6))), s])

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        log_c, kappa, sigma = self.unpack(theta)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            mean = (
                log_c[:, None]
                + _kappa_offset(kappa, self.rho)[:, None]
                + 2.0 * kappa[:, None] * self.log_gamma[None, :]
            )
            z = (self.log_delta[None, :] - mean) / sigma[:, None]
            log_lik = np.sum(self.weights * (-np.log(sigma)[:, None] - 0.5 * z**2), axis=1)
            log_prior = (
                stats.cauchy.logpdf(log_c, scale=PRIOR_SCALE)
                + stats.halfcauchy.logpdf(sigma, scale=PRIOR_SCALE)
                + theta[:, -1]
            )
            if not self.fixed_kappa:
                # uniform prior on kappa, pushed through the logit
                log_prior = log_prior - np.logaddexp(0.0, theta[:, 1]) - np.logaddexp(0.0, -theta[:, 1])
            value = log_lik + log_prior
        return np.where(np.isnan(value), -np.inf, value)

    def proposal_covariance(self, log_c: float, kappa: float, sigma: float) -> np.ndarray:
        """
        Gauss-Newton approximation to the posterior covariance at a point estimate.
        """
        size = self.size
        info = np.zeros((size, size))
        columns = [np.ones_like(self.log_gamma)]
        if not self.fixed_kappa:
            rho_pow = self.rho**-kappa
            d_mean_d_kappa = -2.0 * np.log(self.rho) * rho_pow / (rho_pow - 1.0) + 2.0 * self.log_gamma
            columns.append(kappa * (1.0 - kappa) * d_mean_d_kappa)
        jac = np.stack(columns, axis=1)
        info[: size - 1, : size - 1] = jac.T @ (self.weights[:, None] * jac) / sigma**2
        info[: size - 1, : size - 1] += np.diag([1.0 / PRIOR_SCALE**2, 0.25][: size - 1])
        info[-1, -1] = 2.0 * np.sum(self.weights)
        return np.linalg.inv(info)


def _adaptive_metropolis(
    log_post: _SklPosterior,
    start: np.ndarray,
    covariance: np.ndarray,
    n_chains: int,
    n_draws: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Random-walk Metropolis run in lockstep over chains, first half used for adaptation.

    During warmup the per-chain proposal scale moves towards 25% acceptance and the
    proposal covariance is re-estimated once from the pooled warmup draws.

    Returns:
        np.ndarray: Post-warmup draws of shape (n_draws - warmup, n_chains, size).
    """
    size = start.size
    streams = rng.spawn(n_chains)
    chol = cholesky(covariance, lower=True)
    base_log_scale = np.log(2.38**2 / size)
    log_scale = np.full(n_chains, base_log_scale)

    theta = np.stack([start + 0.5 * chol @ stream.standard_normal(size) for stream in streams])
    log_p = log_post(theta)
    stuck = ~np.isfinite(log_p)
    theta[stuck] = start
    log_p[stuck] = log_post(start[None, :])[0]

    warmup = n_draws // 2
    refit_at = warmup // 2
    draws = np.empty((n_draws, n_chains, size))
    for i in range(n_draws):
        noise = np.stack([stream.standard_normal(size) for stream in streams])
        proposal = theta + np.exp(0.5 * log_scale)[:, None] * (noise @ chol.T)
        log_p_new = log_post(proposal)
        log_u = np.log([stream.uniform() for stream in streams])
        with np.errstate(invalid="ignore"):
            log_ratio = np.where(np.isfinite(log_p_new), log_p_new - log_p, -np.inf)
        accept = log_u < log_ratio
        theta[accept] = proposal[accept]
        log_p[accept] = log_p_new[accept]
        draws[i] = theta

        if i < warmup:
            accept_prob = np.exp(np.minimum(log_ratio, 0.0))
            log_scale += (i + 1) ** -0.6 * (accept_prob - TARGET_ACCEPTANCE)
            if i + 1 == refit_at and refit_at >= 20:
                pooled = draws[refit_at // 2 : i + 1].reshape(-1, size)
                refit = np.atleast_2d(np.cov(pooled, rowvar=False)) + 1e-12 * np.eye(size)
                try:
                    chol = cholesky(refit, lower=True)
                    log_scale[:] = base_log_scale
                except (LinAlgError, ValueError):
                    logger.debug("warmup covariance not positive definite, keeping proposal")
    return draws[warmup:]


def fit_skl_regression(
    gammas: Sequence[float],
    deltas: Sequence[float],
    rho: float,
    fixed_kappa: bool,
    rng: np.random.Generator,
    n_chains: int = 4,
    n_draws: int = 5000,
    sigma_floor: float = 1e-3,
) -> SklRegressionFit:
    """
    Bayesian weighted regression of log delta_t on log gamma_t.

    Priors: log C ~ Cauchy(0, 10), sigma ~ Cauchy+(0, 10) truncated at sigma_floor,
    kappa ~ Uniform(0, 1) unless fixed at 1. Each point's log likelihood is
    multiplied by its regression weight. Falls back to weighted least squares
    when the sampler fails its split-R-hat check.

    Args:
        gammas (Sequence[float]): Learning rates gamma_t for t = 1..T.
        deltas (Sequence[float]): SKL between consecutive epoch averages.
        rho (float): Learning-rate decay factor in (0, 1).
        fixed_kappa (bool): Hold kappa at 1.
        rng (np.random.Generator): Random stream for the sampler.
        n_chains (int): Number of chains.
        n_draws (int): Draws per chain, half of them warmup.
        sigma_floor (float): Lower bound on the noise scale.

    Returns:
        SklRegressionFit: Posterior means and draws of (log C, kappa, sigma).

    Raises:
        RegressionFitError: When no delta_t is positive or the estimates are not finite.
    """
    gammas = np.asarray(gammas, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if gammas.shape != deltas.shape or gammas.ndim != 1 or gammas.size == 0:
        raise ValueError("gammas and deltas must be non-empty vectors of equal length")
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if np.any(gammas <= 0):
        raise ValueError("gammas must be positive")

    weights = regression_weights(gammas.size)
    usable = np.isfinite(deltas) & (deltas > 0.0)
    if not usable.any():
        raise RegressionFitError("no SKL signal: every delta_t is zero")
    log_gamma = np.log(gammas[usable])
    log_delta = np.log(deltas[usable])
    weights = weights[usable]

    log_c, kappa, sigma = _least_squares_estimate(
        log_gamma, log_delta, weights, rho, fixed_kappa, sigma_floor
    )
    log_post = _SklPosterior(log_gamma, log_delta, weights, rho, fixed_kappa, sigma_floor)
    start = log_post.pack(log_c, kappa, sigma)

    draws = _adaptive_metropolis(
        log_post,
        start,
        log_post.proposal_covariance(log_c, kappa, max(sigma, 2.0 * sigma_floor)),
        n_chains,
        n_draws,
        rng,
    )
    per_chain_rhat = max(float(np.max(split_rhat_columns(draws[:, c, :]))) for c in range(n_chains))
    pooled = draws.transpose(1, 0, 2).reshape(-1, log_post.size)
    pooled_rhat = float(np.max(split_rhat_columns(pooled)))

    if np.all(np.isfinite(pooled)) and max(per_chain_rhat, pooled_rhat) <= RHAT_GATE:
        log_c_draws, kappa_draws, sigma_draws = log_post.unpack(pooled)
        posterior = np.column_stack([log_c_draws, kappa_draws, sigma_draws])
        fit = SklRegressionFit(
            log_C_mean=float(log_c_draws.mean()),
            kappa_mean=1.0 if fixed_kappa else float(kappa_draws.mean()),
            sigma_mean=float(sigma_draws.mean()),
            posterior_draws=posterior,
            fixed_kappa=fixed_kappa,
        )
    else:
        logger.warning(
            "SKL regression sampler unhealthy (split R-hat %.3f), using least squares",
            max(per_chain_rhat, pooled_rhat),
        )
        fit = SklRegressionFit(
            log_C_mean=log_c,
            kappa_mean=kappa,
            sigma_mean=sigma,
            posterior_draws=np.array([[log_c, kappa, sigma]]),
            fixed_kappa=fixed_kappa,
            used_fallback=True,
        )

    if not np.all(np.isfinite([fit.log_C_mean, fit.kappa_mean, fit.sigma_mean])):
        raise RegressionFitError("SKL regression produced non-finite estimates")
    logger.debug(
        "SKL fit over %d epochs: log C=%.3f kappa=%.3f sigma=%.3g",
        log_delta.size, fit.log_C_mean, fit.kappa_mean, fit.sigma_mean,
    )
    return fit


def fit_iteration_regression(
    gammas: Sequence[float], iterations: Sequence[float]
) -> tuple[float, float]:
    """
    Weighted least squares of log K_t = alpha log gamma_t + beta.

    Args:
        gammas (Sequence[float]): Learning rates gamma_t for t = 1..T.
        iterations (Sequence[float]): Iterations K_t spent at each rate.

    Returns:
        tuple[float, float]: (alpha_hat, beta_hat).

    Raises:
        RegressionFitError: With fewer than two epochs or a singular design.
    """
    gammas = np.asarray(gammas, dtype=float)
    iterations = np.asarray(iterations, dtype=float)
    if gammas.shape != iterations.shape or gammas.ndim != 1:
        raise ValueError("gammas and iterations must be vectors of equal length")
    if gammas.size < 2:
        raise RegressionFitError(f"need at least 2 epochs, got {gammas.size}")
    if np.any(gammas <= 0) or np.any(iterations <= 0):
        raise ValueError("gammas and iterations must be positive")

    root_w = np.sqrt(regression_weights(gammas.size))
    design = np.column_stack([np.log(gammas), np.ones(gammas.size)]) * root_w[:, None]
    response = np.log(iterations) * root_w
    coef, _, rank, _ = np.linalg.lstsq(design, response, rcond=None)
    if rank < 2:
        raise RegressionFitError("singular design: learning rates are all equal")
    return float(coef[0]), float(coef[1])


def predict_next_K(alpha_hat: float, beta_hat: float, gamma_next: float, K_curr: float) -> float:
    """
    Predicted iterations at the next learning rate.

    Uses gamma_next^alpha e^beta when beta < 0 and keeps K_curr otherwise.

    Args:
        alpha_hat (float): Fitted slope.
        beta_hat (float): Fitted intercept.
        gamma_next (float): Next learning rate rho gamma.
        K_curr (float): Iterations used at the current rate.

    Returns:
        float: Predicted iteration count.
    """
    if not np.all(np.isfinite([alpha_hat, beta_hat, gamma_next, K_curr])):
        raise ValueError("inputs must be finite")
    if beta_hat < 0:
        return float(gamma_next**alpha_hat * np.exp(beta_hat))
    return float(K_curr)
