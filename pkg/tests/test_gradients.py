"""Tests for the pathwise negative-ELBO gradient estimator."""

from __future__ import annotations

import numpy as np
import pytest

from app.schemas import GaussianTargetSpec
from app.services.gradients import EstimatorError, elbo_gradient_oracle, estimate_negative_elbo_grad
from app.services.targets import TargetModel, make_gaussian_target
from app.services.variational_family import (
    FULL_RANK,
    MEAN_FIELD,
    FullRankGaussianParams,
    MeanFieldGaussianParams,
)


class _FixedNoise:
    """Stand-in random stream that returns one preset normal draw."""

    def __init__(self, row: np.ndarray) -> None:
        self.row = row

    def standard_normal(self, size: tuple[int, int]) -> np.ndarray:
        return self.row.reshape(size)


def _draws(params, target: TargetModel, count: int, seed: int) -> np.ndarray:
    """
    Collect single-sample gradient estimates.

    Args:
        params: Variational parameters.
        target (TargetModel): Target.
        count (int): Number of estimates.
        seed (int): Random seed.

    Returns:
        np.ndarray: Array of shape (count, parameter size).
    """
    rng = np.random.default_rng(seed)
    return np.array(
        [estimate_negative_elbo_grad(params, target, 1, rng).grad for _ in range(count)]
    )


def _assert_within_five_standard_errors(draws: np.ndarray, exact: np.ndarray) -> None:
    """
    Every coordinate of the sample mean lies within 5 standard errors of the truth.
    """
    mean = draws.mean(axis=0)
    standard_error = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(mean - exact) <= 5.0 * standard_error + 1e-12)


def test_mean_field_estimator_is_unbiased() -> None:
    """
    Single-sample estimates average to the closed-form gradient for N(0, I).
    """
    target = make_gaussian_target(GaussianTargetSpec(d=5))
    params = MeanFieldGaussianParams(
        tau=[0.5, -0.3, 1.0, 0.0, 0.2], psi=[0.1, -0.2, 0.3, 0.0, -0.5]
    )
    # -ELBO = KL(q || N(0, I)) + const
    exact = np.concatenate([params.tau, params.sigma**2 - 1.0])
    _assert_within_five_standard_errors(_draws(params, target, 100_000, seed=0), exact)


def test_full_rank_estimator_is_unbiased() -> None:
    """
    Full-rank estimates average to the closed-form gradient for N(0, I).
    """
    target = make_gaussian_target(GaussianTargetSpec(d=3))
    scale_tril = np.array([[1.2, 0.0, 0.0], [0.3, 0.8, 0.0], [-0.4, 0.1, 1.1]])
    params = FullRankGaussianParams(mu=[0.2, -0.1, 0.4], scale_tril=scale_tril)
    rows, cols = np.tril_indices(3, k=-1)
    diag = np.diag(scale_tril)
    exact = np.concatenate([params.mu, scale_tril[rows, cols], diag**2 - 1.0])
    _assert_within_five_standard_errors(_draws(params, target, 40_000, seed=1), exact)


def test_num_samples_averages_estimates() -> None:
    """
    An M-sample estimate equals the mean of M single-sample estimates on the same noise.
    """
    target = make_gaussian_target(GaussianTargetSpec(d=2, structure="diag_nonidentity"))
    params = MeanFieldGaussianParams(tau=[0.3, -0.2], psi=[0.1, 0.4])
    batched = estimate_negative_elbo_grad(params, target, 4, np.random.default_rng(7)).grad
    noise = np.random.default_rng(7).standard_normal((4, 2))
    singles = [
        estimate_negative_elbo_grad(params, target, 1, _FixedNoise(row)).grad for row in noise
    ]
    np.testing.assert_allclose(batched, np.mean(singles, axis=0), rtol=1e-12, atol=1e-12)


def test_variance_shrinks_with_num_samples() -> None:
    """
    Sixteen draws per estimate cut the per-coordinate variance to roughly 1/16.
    """
    target = make_gaussian_target(GaussianTargetSpec(d=3, structure="diag_nonidentity"))
    params = MeanFieldGaussianParams(tau=[0.4, -0.6, 0.1], psi=[0.2, -0.1, 0.3])
    rng = np.random.default_rng(8)
    single = np.array(
        [estimate_negative_elbo_grad(params, target, 1, rng).grad for _ in range(20_000)]
    )
    averaged = np.array(
        [estimate_negative_elbo_grad(params, target, 16, rng).grad for _ in range(20_000)]
    )
    ratio = averaged.var(axis=0, ddof=1) / single.var(axis=0, ddof=1)
    assert np.all(ratio >= 1.0 / 24.0)
    assert np.all(ratio <= 1.0 / 10.0)


def test_identical_streams_give_identical_estimates() -> None:
    """
    Two generators with the same seed produce bit-identical estimates.
    """
    target = make_gaussian_target(GaussianTargetSpec(d=4, structure="banded_corr", corr=0.5))
    params = MeanFieldGaussianParams(tau=[0.1, 0.2, -0.3, 0.4], psi=[0.0, -0.2, 0.1, 0.3])
    first = np.random.default_rng(21)
    second = np.random.default_rng(21)
    for _ in range(5):
        left = estimate_negative_elbo_grad(params, target, 10, first)
        right = estimate_negative_elbo_grad(params, target, 10, second)
        assert np.array_equal(left.grad, right.grad)


def test_non_finite_target_raises() -> None:
    """
    A target that returns NaN raises EstimatorError carrying the offending draw.
    """
    target = TargetModel(
        dim=2,
        log_density_u=lambda theta: np.full(np.shape(theta)[:-1], np.nan),
        grad_log_density_u=lambda theta: np.zeros_like(theta),
    )
    params = MeanFieldGaussianParams(tau=[0.0, 0.0], psi=[0.0, 0.0])
    with pytest.raises(EstimatorError) as excinfo:
        estimate_negative_elbo_grad(params, target, 3, np.random.default_rng(0))
    assert excinfo.value.theta.shape == (2,)


def test_invalid_arguments_raise() -> None:
    """
    Zero samples and a dimension mismatch are rejected.
    """
    target = make_gaussian_target(GaussianTargetSpec(d=2))
    params = MeanFieldGaussianParams(tau=[0.0, 0.0], psi=[0.0, 0.0])
    with pytest.raises(ValueError):
        estimate_negative_elbo_grad(params, target, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        estimate_negative_elbo_grad(
            MeanFieldGaussianParams(tau=[0.0], psi=[0.0]), target, 1, np.random.default_rng(0)
        )


def test_oracle_uses_flat_layout() -> None:
    """
    The oracle maps flat vectors to gradients of the same size for both families.
    """
    target = make_gaussian_target(GaussianTargetSpec(d=3))
    rng = np.random.default_rng(0)
    assert elbo_gradient_oracle(target, MEAN_FIELD, 5, rng)(np.zeros(6)).shape == (6,)
    assert elbo_gradient_oracle(target, FULL_RANK, 5, rng)(np.zeros(9)).shape == (9,)
