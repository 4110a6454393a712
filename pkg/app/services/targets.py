"""Target distributions: unnormalized log densities and their gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky
from scipy.optimize import minimize
from scipy.special import expit

from app.schemas import GaussianTargetSpec
from app.services.variational_family import (
    FullRankGaussianParams,
    MeanFieldGaussianParams,
    as_full_rank,
    kl_to,
)

logger = logging.getLogger(__name__)

# Functions accept theta of shape (d,) or a batch (M, d).
LogDensityFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class TargetModel:
    """Unnormalized posterior with analytic gradient and optional known moments."""

    dim: int
    log_density_u: LogDensityFn
    grad_log_density_u: LogDensityFn
    name: str = "target"
    mean: Optional[np.ndarray] = None
    sd: Optional[np.ndarray] = None


def covariance_matrix(spec: GaussianTargetSpec) -> np.ndarray:
    """
    Build the covariance V for a benchmark structure.

    Args:
        spec (GaussianTargetSpec): Target spec.

    Returns:
        np.ndarray: d x d covariance matrix.
    """
    d = spec.d
    if spec.structure == "identity":
        return np.eye(d)
    if spec.structure == "diag_nonidentity":
        return np.diag(np.arange(1, d + 1, dtype=float))
    if spec.structure == "uniform_corr":
        return (1.0 - spec.corr) * np.eye(d) + spec.corr * np.ones((d, d))
    lags = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    return spec.corr**lags


def make_gaussian_target(spec: GaussianTargetSpec) -> TargetModel:
    """
    Build the N(0, V) target with the normalizing constant dropped.

    Args:
        spec (GaussianTargetSpec): Target spec.

    Returns:
        TargetModel: Target with log density -0.5 theta^T V^-1 theta.

    Raises:
        ValueError: When V is not symmetric positive definite.
    """
    covariance = covariance_matrix(spec)
    try:
        factor = cho_factor(covariance, lower=True)
    except LinAlgError as exc:
        raise ValueError(f"covariance for {spec.structure} is not SPD") from exc
    precision = cho_solve(factor, np.eye(spec.d))
    precision = 0.5 * (precision + precision.T)

    def log_density_u(theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return -0.5 * np.sum((theta @ precision) * theta, axis=-1)

    def grad_log_density_u(theta: np.ndarray) -> np.ndarray:
        return -(np.asarray(theta, dtype=float) @ precision)

    return TargetModel(
        dim=spec.d,
        log_density_u=log_density_u,
        grad_log_density_u=grad_log_density_u,
        name=f"gaussian_{spec.structure}_{spec.d}",
        mean=np.zeros(spec.d),
        sd=np.sqrt(np.diag(covariance)),
    )


def gaussian_target_params(spec: GaussianTargetSpec) -> FullRankGaussianParams:
    """
    Express the target N(0, V) as a full-rank family member.
    """
    return FullRankGaussianParams(
        mu=np.zeros(spec.d), scale_tril=cholesky(covariance_matrix(spec), lower=True)
    )


def optimal_full_rank_approximation(spec: GaussianTargetSpec) -> FullRankGaussianParams:
    """
    Optimal full-rank approximation; the target itself lies in the family.
    """
    return gaussian_target_params(spec)


def optimal_mf_approximation(
    spec: GaussianTargetSpec, tol: float = 1e-10
) -> MeanFieldGaussianParams:
    """
    Minimize KL(q || pi) over the mean-field family by deterministic optimization.

    Args:
        spec (GaussianTargetSpec): Target spec.
        tol (float): Gradient tolerance for the optimizer.

    Returns:
        MeanFieldGaussianParams: Optimal mean-field approximation q*.
    """
    covariance = covariance_matrix(spec)
    if spec.is_diagonal:
        return MeanFieldGaussianParams(
            tau=np.zeros(spec.d), psi=0.5 * np.log(np.diag(covariance))
        )

    precision = cho_solve(cho_factor(covariance, lower=True), np.eye(spec.d))
    precision_diag = np.diag(precision)
    d = spec.d

    # KL(q || pi) up to the constant log det V: 0.5 [sum P_ii s_i^2 + tau^T P tau - d] - sum psi
    def objective(vector: np.ndarray) -> tuple[float, np.ndarray]:
        tau, psi = vector[:d], vector[d:]
        var = np.exp(2.0 * psi)
        p_tau = precision @ tau
        value = 0.5 * (precision_diag @ var + tau @ p_tau - d) - np.sum(psi)
        grad = np.concatenate([p_tau, precision_diag * var - 1.0])
        return float(value), grad

    start = np.concatenate([np.zeros(d), 0.5 * np.log(np.diag(covariance))])
    result = minimize(
        objective,
        start,
        jac=True,
        method="L-BFGS-B",
        options={"gtol": tol, "ftol": 1e-15, "maxiter": 10_000},
    )
    if not result.success:
        logger.warning("q* optimization stopped early: %s", result.message)
    return MeanFieldGaussianParams(tau=result.x[:d], psi=result.x[d:])


def kl_to_gaussian_target(params: MeanFieldGaussianParams, spec: GaussianTargetSpec) -> float:
    """
    Closed-form KL(q || pi) for a Gaussian target.

    Args:
        params (MeanFieldGaussianParams): Approximation q.
        spec (GaussianTargetSpec): Target spec.

    Returns:
        float: KL divergence.
    """
    return kl_to(as_full_rank(params), gaussian_target_params(spec))


def make_logistic_regression_target(
    X: np.ndarray, y: np.ndarray, prior_scale: float
) -> TargetModel:
    """
    Bayesian logistic regression with an isotropic Gaussian prior.

    Args:
        X (np.ndarray): Design matrix of shape (n, p).
        y (np.ndarray): Binary responses of length n.
        prior_scale (float): Prior standard deviation s.

    Returns:
        TargetModel: Target over the coefficient vector beta.

    Raises:
        ValueError: On inconsistent shapes, NaN data or a nonpositive scale.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be a matrix, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ValueError(f"y must have length {X.shape[0]}, got shape {y.shape}")
    if np.isnan(X).any() or np.isnan(y).any():
        raise ValueError("data contains NaN")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("y must contain only 0 and 1")
    if prior_scale <= 0:
        raise ValueError(f"prior_scale must be positive, got {prior_scale}")
    precision = 1.0 / prior_scale**2

    def log_density_u(beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        eta = beta @ X.T
        log_lik = np.sum(y * eta - np.logaddexp(0.0, eta), axis=-1)
        return log_lik - 0.5 * precision * np.sum(beta**2, axis=-1)

    def grad_log_density_u(beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        residual = y - expit(beta @ X.T)
        return residual @ X - precision * beta

    return TargetModel(
        dim=X.shape[1],
        log_density_u=log_density_u,
        grad_log_density_u=grad_log_density_u,
        name=f"logistic_{X.shape[0]}x{X.shape[1]}",
    )


def make_synthetic_logistic_target(
    n_obs: int, dim: int, prior_scale: float, rng: np.random.Generator
) -> TargetModel:
    """
    Simulate a logistic regression data set and wrap it as a target.

    Args:
        n_obs (int): Number of observations.
        dim (int): Number of coefficients.
        prior_scale (float): Prior standard deviation.
        rng (np.random.Generator): Random stream for the data.

    Returns:
        TargetModel: Logistic regression target.
    """
    X = rng.standard_normal((n_obs, dim)) / np.sqrt(dim)
    beta_true = rng.standard_normal(dim)
    y = (rng.uniform(size=n_obs) < expit(X @ beta_true)).astype(float)
    return make_logistic_regression_target(X, y, prior_scale)
