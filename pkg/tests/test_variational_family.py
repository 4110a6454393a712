"""Tests for Gaussian variational families."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate, stats

from app.services.variational_family import (
    FULL_RANK,
    MEAN_FIELD,
    FullRankGaussianParams,
    MeanFieldGaussianParams,
    as_full_rank,
    entropy,
    initial_params,
    kl_to,
    params_from_vector,
    sample,
    skl,
    vector_size,
)


def _quadrature_kl(mean_p: float, sd_p: float, mean_q: float, sd_q: float) -> float:
    """
    KL(p || q) between 1-d normals by adaptive quadrature.

    Args:
        mean_p (float): Mean of p.
        sd_p (float): Standard deviation of p.
        mean_q (float): Mean of q.
        sd_q (float): Standard deviation of q.

    Returns:
        float: Numerical KL divergence.
    """

    def integrand(x: float) -> float:
        log_p = stats.norm.logpdf(x, mean_p, sd_p)
        return math.exp(log_p) * (log_p - stats.norm.logpdf(x, mean_q, sd_q))

    value, _ = integrate.quad(
        integrand,
        mean_p - 12.0 * sd_p,
        mean_p + 12.0 * sd_p,
        points=[mean_p],
        limit=200,
        epsabs=1e-11,
        epsrel=1e-11,
    )
    return value


def _random_mean_field(rng: np.random.Generator, dim: int) -> MeanFieldGaussianParams:
    """
    Draw mean-field parameters with |tau| <= 3 and |psi| <= 1.5.
    """
    return MeanFieldGaussianParams(
        tau=rng.uniform(-3.0, 3.0, dim), psi=rng.uniform(-1.5, 1.5, dim)
    )


def test_skl_matches_quadrature_in_one_dimension() -> None:
    """
    Match numerical integration of both KL directions for random 1-d pairs.
    """
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = _random_mean_field(rng, 1)
        q = _random_mean_field(rng, 1)
        expected = _quadrature_kl(p.tau[0], p.sigma[0], q.tau[0], q.sigma[0]) + _quadrature_kl(
            q.tau[0], q.sigma[0], p.tau[0], p.sigma[0]
        )
        assert skl(p, q) == pytest.approx(expected, abs=1e-6)


def test_kl_zero_for_identical_and_skl_symmetric() -> None:
    """
    KL vanishes on identical inputs and SKL is symmetric.
    """
    rng = np.random.default_rng(1)
    p = _random_mean_field(rng, 4)
    q = _random_mean_field(rng, 4)
    assert kl_to(p, p) == 0.0
    assert skl(p, q) == pytest.approx(skl(q, p), rel=1e-12)
    assert skl(p, q) > 0.0


def test_skl_invariant_under_permutation_and_factorizes() -> None:
    """
    Reordering coordinates leaves SKL unchanged and the mean-field SKL is a per-coordinate sum.
    """
    rng = np.random.default_rng(4)
    p = _random_mean_field(rng, 6)
    q = _random_mean_field(rng, 6)
    order = rng.permutation(6)
    permuted_p = MeanFieldGaussianParams(tau=p.tau[order], psi=p.psi[order])
    permuted_q = MeanFieldGaussianParams(tau=q.tau[order], psi=q.psi[order])
    assert skl(permuted_p, permuted_q) == pytest.approx(skl(p, q), rel=1e-12)

    per_coordinate = sum(
        skl(
            MeanFieldGaussianParams(tau=p.tau[i : i + 1], psi=p.psi[i : i + 1]),
            MeanFieldGaussianParams(tau=q.tau[i : i + 1], psi=q.psi[i : i + 1]),
        )
        for i in range(6)
    )
    assert skl(p, q) == pytest.approx(per_coordinate, rel=1e-12)


def test_skl_is_sum_of_both_directions() -> None:
    """
    SKL equals KL(p || q) + KL(q || p) for random pairs in both families.
    """
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = _random_mean_field(rng, 3)
        q = _random_mean_field(rng, 3)
        assert skl(p, q) == pytest.approx(kl_to(p, q) + kl_to(q, p), rel=1e-12)
        tril = np.tril(rng.normal(scale=0.3, size=(3, 3)), k=-1)
        full_p = FullRankGaussianParams(mu=p.tau, scale_tril=tril + np.diag(p.sigma))
        full_q = as_full_rank(q)
        assert skl(full_p, full_q) == pytest.approx(
            kl_to(full_p, full_q) + kl_to(full_q, full_p), rel=1e-12
        )


def test_skl_stays_finite_for_extreme_log_scales() -> None:
    """
    log-scale gaps far beyond the exp overflow threshold still give a finite, large SKL.
    """
    narrow = MeanFieldGaussianParams(tau=[0.0], psi=[0.0])
    wide = MeanFieldGaussianParams(tau=[1.0], psi=[400.0])
    with np.errstate(over="raise"):
        value = skl(narrow, wide)
    assert math.isfinite(value)
    assert value > 1e200
    assert skl(wide, narrow) == value


def test_sample_pushforward_matches_moments() -> None:
    """
    Over 10^6 standard normal draws the sample mean and covariance sit within 5 standard errors.
    """
    rng = np.random.default_rng(6)
    count = 1_000_000
    cases = [
        MeanFieldGaussianParams(tau=[1.0, -2.0], psi=[0.5, -0.3]),
        FullRankGaussianParams(mu=[0.5, 1.5], scale_tril=[[1.2, 0.0], [-0.7, 0.4]]),
    ]
    for params in cases:
        full = as_full_rank(params)
        draws = sample(params, rng.standard_normal((count, 2)))
        centered = draws - full.mu

        mean_se = np.sqrt(np.diag(full.covariance) / count)
        assert np.all(np.abs(draws.mean(axis=0) - full.mu) < 5.0 * mean_se)

        products = centered[:, :, None] * centered[:, None, :]
        cov_se = products.std(axis=0) / np.sqrt(count)
        assert np.all(np.abs(products.mean(axis=0) - full.covariance) < 5.0 * cov_se)


def test_full_rank_kl_agrees_with_mean_field_on_diagonal() -> None:
    """
    The Cholesky formula reduces to the mean-field closed form for diagonal scales.
    """
    rng = np.random.default_rng(2)
    p = _random_mean_field(rng, 5)
    q = _random_mean_field(rng, 5)
    assert kl_to(as_full_rank(p), as_full_rank(q)) == pytest.approx(kl_to(p, q), rel=1e-10)


def test_full_rank_kl_matches_dense_formula() -> None:
    """
    Compare against the textbook formula with explicit inverses and determinants.
    """
    rng = np.random.default_rng(3)
    dim = 3
    tril_p = np.tril(rng.normal(size=(dim, dim)), k=-1) + np.diag(rng.uniform(0.5, 2.0, dim))
    tril_q = np.tril(rng.normal(size=(dim, dim)), k=-1) + np.diag(rng.uniform(0.5, 2.0, dim))
    p = FullRankGaussianParams(mu=rng.normal(size=dim), scale_tril=tril_p)
    q = FullRankGaussianParams(mu=rng.normal(size=dim), scale_tril=tril_q)

    cov_p, cov_q = p.covariance, q.covariance
    precision_q = np.linalg.inv(cov_q)
    diff = q.mu - p.mu
    expected = 0.5 * (
        np.trace(precision_q @ cov_p)
        + diff @ precision_q @ diff
        - dim
        + np.log(np.linalg.det(cov_q) / np.linalg.det(cov_p))
    )
    assert kl_to(p, q) == pytest.approx(expected, rel=1e-9)


def test_entropy_matches_scipy() -> None:
    """
    Analytic entropy agrees with scipy's multivariate normal.
    """
    params = MeanFieldGaussianParams(tau=[0.0, 1.0], psi=[0.3, -0.2])
    expected = stats.multivariate_normal(params.tau, np.diag(params.sigma**2)).entropy()
    assert entropy(params) == pytest.approx(expected, rel=1e-12)
    assert entropy(as_full_rank(params)) == pytest.approx(expected, rel=1e-12)


def test_sample_applies_reparameterization() -> None:
    """
    theta = tau + sigma z for mean-field and mu + L z for full rank, batched.
    """
    params = MeanFieldGaussianParams(tau=[1.0, -1.0], psi=[0.0, math.log(2.0)])
    noise = np.array([[1.0, 1.0], [0.0, -1.0]])
    np.testing.assert_allclose(sample(params, noise), [[2.0, 1.0], [1.0, -3.0]])

    full = FullRankGaussianParams(mu=[0.0, 0.0], scale_tril=[[1.0, 0.0], [0.5, 2.0]])
    np.testing.assert_allclose(sample(full, np.array([1.0, 1.0])), [1.0, 2.5])

    with pytest.raises(ValueError):
        sample(params, np.zeros(3))


def test_flat_layouts_and_sizes() -> None:
    """
    Vector layouts have the documented sizes and rebuild the same distribution.
    """
    assert vector_size(MEAN_FIELD, 4) == 8
    assert vector_size(FULL_RANK, 4) == 4 + 10

    full = FullRankGaussianParams(
        mu=[0.5, -0.5, 1.0],
        scale_tril=[[1.0, 0.0, 0.0], [0.2, 2.0, 0.0], [-0.3, 0.4, 0.5]],
    )
    vector = full.to_vector()
    np.testing.assert_allclose(vector[3:6], [0.2, -0.3, 0.4])
    np.testing.assert_allclose(vector[6:], np.log([1.0, 2.0, 0.5]))
    rebuilt = params_from_vector(FULL_RANK, vector, 3)
    np.testing.assert_allclose(rebuilt.scale_tril, full.scale_tril)

    assert params_from_vector(MEAN_FIELD, initial_params(MEAN_FIELD, 2).to_vector(), 2).dim == 2


def test_invalid_parameters_rejected() -> None:
    """
    Reject non-finite values, shape mismatches and family mismatches.
    """
    with pytest.raises(ValueError):
        MeanFieldGaussianParams(tau=[0.0, np.nan], psi=[0.0, 0.0])
    with pytest.raises(ValueError):
        MeanFieldGaussianParams(tau=[0.0], psi=[0.0, 0.0])
    with pytest.raises(ValueError):
        FullRankGaussianParams(mu=[0.0, 0.0], scale_tril=[[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        FullRankGaussianParams(mu=[0.0, 0.0], scale_tril=[[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        kl_to(initial_params(MEAN_FIELD, 2), initial_params(FULL_RANK, 2))
    with pytest.raises(ValueError):
        skl(initial_params(MEAN_FIELD, 2), initial_params(MEAN_FIELD, 3))
