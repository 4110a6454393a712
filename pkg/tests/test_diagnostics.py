"""Tests for ESS, MCSE, R-hat and the convergence detectors."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.signal import lfilter

from app.services.diagnostics import (
    IterateHistory,
    diagnostics_report,
    distance_based_converged,
    distance_checkpoints,
    ess,
    is_degenerate,
    mcse,
    rhat_max_window_search,
    sasa_invariant,
    sasa_plus_converged,
    split_rhat,
)


def _ar1(phi: float, length: int, rng: np.random.Generator) -> np.ndarray:
    """
    Stationary AR(1) series with unit innovations.

    Args:
        phi (float): Autoregressive coefficient.
        length (int): Series length.
        rng (np.random.Generator): Random stream.

    Returns:
        np.ndarray: Series of the requested length.
    """
    noise = rng.standard_normal(length + 1000)
    return lfilter([1.0], [1.0, -phi], noise)[1000:]


def _history(rows: np.ndarray) -> IterateHistory:
    """
    Fill an IterateHistory with the given rows.
    """
    history = IterateHistory(rows.shape[1], capacity=4)
    for row in rows:
        history.append(row)
    return history


def _invariant_inputs(values: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Build iterates and unit directions whose SASA invariant equals `values`.
    """
    directions = np.ones_like(values)
    return (values + gamma) / 2.0, directions


def test_history_grows_and_exposes_read_only_views() -> None:
    """
    The buffer grows past its capacity and hands out read-only views.
    """
    history = _history(np.arange(20, dtype=float).reshape(10, 2))
    assert len(history) == 10
    np.testing.assert_array_equal(history.tail(2), [[16.0, 17.0], [18.0, 19.0]])
    assert history.tail(50).shape == (10, 2)
    np.testing.assert_array_equal(history.row(1), [0.0, 1.0])
    with pytest.raises(ValueError):
        history.as_array()[0, 0] = 1.0
    with pytest.raises(IndexError):
        history.row(11)
    with pytest.raises(ValueError):
        history.append(np.zeros(3))


def test_ess_of_iid_series() -> None:
    """
    White noise has ESS close to its length and MCSE close to sd / sqrt(K).
    """
    for seed in range(5):
        series = np.random.default_rng(seed).standard_normal(10_000)
        assert 8000 <= ess(series) <= 12_500
        assert 0.007 <= mcse(series) <= 0.014


def test_ess_of_ar1_series() -> None:
    """
    AR(1) with phi = 0.9 has ESS near K (1 - phi) / (1 + phi) = K / 19.
    """
    length = 50_000
    values = [ess(_ar1(0.9, length, np.random.default_rng(seed))) for seed in range(20)]
    median = float(np.median(values))
    assert 0.7 * length / 19 <= median <= 1.4 * length / 19


def test_mcse_is_sd_over_root_ess() -> None:
    """
    MCSE times sqrt(ESS) recovers the sample standard deviation.
    """
    series = _ar1(0.5, 4000, np.random.default_rng(3))
    assert mcse(series) * np.sqrt(ess(series)) == pytest.approx(np.std(series, ddof=1))


def test_constant_series_is_degenerate() -> None:
    """
    A constant series has ESS K, zero MCSE and R-hat 1.
    """
    series = np.full(50, 2.5)
    assert is_degenerate(series)
    assert ess(series) == 50.0
    assert mcse(series) == 0.0
    assert split_rhat(series) == 1.0
    report = diagnostics_report(np.column_stack([series, np.arange(50.0)]))
    assert report.ess[0] == 50.0
    assert report.window == 50


def test_short_series_rejected() -> None:
    """
    ESS needs at least eight values.
    """
    with pytest.raises(ValueError):
        ess(np.arange(7.0))


def test_split_rhat_behaviour() -> None:
    """
    iid halves give R-hat near 1, shifted halves give a large R-hat, affine maps do not matter.
    """
    passes = sum(
        split_rhat(np.random.default_rng(seed).standard_normal(1000)) < 1.05 for seed in range(100)
    )
    assert passes >= 95

    rng = np.random.default_rng(0)
    shifted = np.concatenate([rng.standard_normal(500), 3.0 + rng.standard_normal(500)])
    assert split_rhat(shifted) > 1.5

    series = rng.standard_normal(301)
    assert split_rhat(4.0 + 7.0 * series) == pytest.approx(split_rhat(series), abs=1e-10)


def test_window_search_waits_for_enough_iterates() -> None:
    """
    No search happens before 0.95 k reaches W_min.
    """
    history = _history(np.random.default_rng(0).standard_normal((210, 2)))
    assert rhat_max_window_search(history, 200) is None
    history.append(np.zeros(2))
    assert rhat_max_window_search(history, 200) is not None


def test_window_search_excludes_initial_drift() -> None:
    """
    A chain that drifts then settles converges on a window free of the drift.
    """
    rng = np.random.default_rng(1)
    drift = np.linspace(10.0, 0.0, 1000)[:, None] + rng.standard_normal((1000, 3))
    history = _history(np.vstack([drift, rng.standard_normal((1000, 3))]))
    result = rhat_max_window_search(history, 200)
    assert result.converged
    assert result.rhat_max <= 1.1
    assert result.window <= 0.55 * 2000


def test_window_search_declares_convergence_after_drift_exits() -> None:
    """
    Scanning every 100 iterations, convergence is declared on a drift-free window.
    """
    clean = 0
    for case in range(20):
        rng = np.random.default_rng(case)
        drift_length = 600 + 100 * (case % 4)
        dims = 1 if case % 2 == 0 else 3
        drift = np.linspace(30.0, 0.0, drift_length)[:, None] + rng.standard_normal((drift_length, dims))
        rows = np.vstack([drift, rng.standard_normal((2000, dims))])

        history = IterateHistory(dims)
        for k, row in enumerate(rows, start=1):
            history.append(row)
            if k % 100:
                continue
            result = rhat_max_window_search(history, 200)
            if result is not None and result.converged:
                clean += result.window <= k - drift_length
                break
    assert clean >= 18


def test_window_search_convergence_rate_grows_with_stationary_length() -> None:
    """
    The fraction of chains declared converged does not fall as iterates past the drift accumulate.
    """
    drift_length = 600
    stationary_lengths = (0, 100, 400, 2000)
    rates = []
    for stationary in stationary_lengths:
        converged = 0
        for seed in range(30):
            rng = np.random.default_rng(seed)
            drift = np.linspace(30.0, 0.0, drift_length)[:, None] + rng.standard_normal(
                (drift_length, 1)
            )
            rows = np.vstack([drift, rng.standard_normal((stationary, 1))])
            converged += rhat_max_window_search(_history(rows), 200).converged
        rates.append(converged / 30)
    assert rates == sorted(rates)
    assert rates[0] == 0.0
    assert rates[-1] >= 0.9


def test_sasa_plus_accepts_mean_zero_invariant() -> None:
    """
    An iid mean-zero invariant is accepted at roughly the nominal rate.
    """
    gamma = 0.1
    accepted = 0
    for seed in range(20):
        values = np.random.default_rng(seed).standard_normal((2000, 1))
        iterates, directions = _invariant_inputs(values, gamma)
        np.testing.assert_allclose(sasa_invariant(iterates, directions, gamma), values[:, 0])
        accepted += sasa_plus_converged(iterates, directions, gamma)
    assert accepted >= 15


def test_sasa_plus_multivariate_accepts_mean_zero() -> None:
    """
    The component-wise variant with Bonferroni correction accepts iid noise.
    """
    gamma = 0.1
    accepted = 0
    for seed in range(20):
        values = np.random.default_rng(seed).standard_normal((2000, 3))
        iterates, directions = _invariant_inputs(values, gamma)
        accepted += sasa_plus_converged(iterates, directions, gamma, multivariate=True)
    assert accepted >= 15


def test_sasa_plus_rejects_shifted_or_short_series() -> None:
    """
    A clearly nonzero mean is rejected and too-short series never pass.
    """
    gamma = 0.1
    rng = np.random.default_rng(0)
    iterates, directions = _invariant_inputs(5.0 + rng.standard_normal((2000, 1)), gamma)
    assert not sasa_plus_converged(iterates, directions, gamma)

    iterates, directions = _invariant_inputs(rng.standard_normal((50, 1)), gamma)
    assert not sasa_plus_converged(iterates, directions, gamma)


def test_distance_checkpoints() -> None:
    """
    Checkpoints are ceil(q^n) within the requested range.
    """
    assert distance_checkpoints(2.0, 100) == [1, 2, 4, 8, 16, 32, 64]
    assert distance_checkpoints(2.0, 100, first=16) == [16, 32, 64]
    assert distance_checkpoints(1.5, 10) == [1, 2, 3, 4, 6, 8]


def test_distance_detector_regimes() -> None:
    """
    Drift has slope 2, a random walk slope 1 and a stationary cloud slope 0.
    """
    initial = np.zeros(200)
    steps = np.arange(1, 257)[:, None]

    drift = _history(steps * np.full(200, 0.01))
    assert not distance_based_converged(drift, initial, thresh=0.5)

    walk = _history(np.cumsum(np.random.default_rng(0).standard_normal((256, 200)), axis=0))
    assert not distance_based_converged(walk, initial, thresh=0.5)
    assert distance_based_converged(walk, initial, thresh=2.0)

    cloud = _history(3.0 + np.random.default_rng(1).standard_normal((256, 200)))
    assert distance_based_converged(cloud, initial, thresh=0.5)

    assert not distance_based_converged(_history(np.ones((10, 2))), np.zeros(2))
    with pytest.raises(ValueError):
        distance_based_converged(cloud, initial, q=1.0)
