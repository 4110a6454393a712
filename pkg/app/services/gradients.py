"""Reparameterization estimator of the negative-ELBO gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.services.targets import TargetModel
from app.services.variational_family import (
    FullRankGaussianParams,
    MeanFieldGaussianParams,
    VariationalParams,
    params_from_vector,
    sample,
)

GradientOracle = Callable[[np.ndarray], np.ndarray]


class EstimatorError(ValueError):
    """Raised when the target is not finite at a sampled point."""

    def __init__(self, message: str, theta: np.ndarray) -> None:
        super().__init__(message)
        self.theta = theta


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    """Stochastic gradient of the negative ELBO with respect to lambda."""

    grad: np.ndarray
    per_sample_logp_mean: float


def estimate_negative_elbo_grad(
    params: VariationalParams,
    target: TargetModel,
    num_samples: int,
    rng: np.random.Generator,
) -> GradientEstimate:
    """
    Estimate grad of -ELBO = -E_q log pi^u - H(q) with M pathwise draws.

    The entropy gradient is analytic; only the expected log density is sampled.

    Args:
        params (VariationalParams): Current variational parameters.
        target (TargetModel): Target distribution.
        num_samples (int): Monte Carlo sample count M.
        rng (np.random.Generator): Random stream; consumed for M x d normals.

    Returns:
        GradientEstimate: Gradient in the flat parameter layout.

    Raises:
        ValueError: When M < 1 or dimensions disagree.
        EstimatorError: When the target log density or gradient is not finite.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    if params.dim != target.dim:
        raise ValueError(f"params have d={params.dim} but target has d={target.dim}")

    noise = rng.standard_normal((num_samples, params.dim))
    theta = sample(params, noise)
    log_density = np.asarray(target.log_density_u(theta), dtype=float)
    score = np.asarray(target.grad_log_density_u(theta), dtype=float)
    bad_rows = ~(np.isfinite(log_density) & np.all(np.isfinite(score), axis=1))
    if bad_rows.any():
        offending = theta[int(np.argmax(bad_rows))]
        raise EstimatorError(f"target not finite at theta={offending}", offending)

    if isinstance(params, MeanFieldGaussianParams):
        grad_tau = -score.mean(axis=0)
        grad_psi = -(score * noise).mean(axis=0) * params.sigma - 1.0
        grad = np.concatenate([grad_tau, grad_psi])
    else:
        grad = _full_rank_gradient(params, score, noise)
    return GradientEstimate(grad=grad, per_sample_logp_mean=float(log_density.mean()))


def _full_rank_gradient(
    params: FullRankGaussianParams, score: np.ndarray, noise: np.ndarray
) -> np.ndarray:
    """
    Chain rule for theta = mu + L z with a log-parameterized diagonal.

    Args:
        params (FullRankGaussianParams): Current parameters.
        score (np.ndarray): Target gradients at the draws, shape (M, d).
        noise (np.ndarray): Standard-normal draws, shape (M, d).

    Returns:
        np.ndarray: Gradient in the (mu, strict lower, log diag) layout.
    """
    d = params.dim
    # d/dL_ij of E[log pi(mu + L z)] = E[g_i z_j]
    grad_scale = score.T @ noise / score.shape[0]
    rows, cols = np.tril_indices(d, k=-1)
    diag = np.diag(params.scale_tril)
    grad_log_diag = -np.diag(grad_scale) * diag - 1.0
    return np.concatenate([-score.mean(axis=0), -grad_scale[rows, cols], grad_log_diag])


def elbo_gradient_oracle(
    target: TargetModel,
    family: str,
    num_samples: int,
    rng: np.random.Generator,
) -> GradientOracle:
    """
    Wrap the estimator as a flat-vector oracle for the optimization loop.

    Args:
        target (TargetModel): Target distribution.
        family (str): Variational family name.
        num_samples (int): Monte Carlo sample count M.
        rng (np.random.Generator): Random stream shared across calls.

    Returns:
        GradientOracle: Callable mapping lambda to a gradient estimate.
    """

    def oracle(vector: np.ndarray) -> np.ndarray:
        params = params_from_vector(family, vector, target.dim)
        return estimate_negative_elbo_grad(params, target, num_samples, rng).grad

    return oracle
