"""Markov-chain diagnostics for fixed-learning-rate iterates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft as fft
from scipy import stats

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
MIN_SERIES_LENGTH = 8
NUMERICAL_EPS = 1e-8


class IterateHistory:
    """Append-only buffer of the iterates produced within one learning-rate epoch."""

    def __init__(self, size: int, epoch_start_step: int = 0, capacity: int = 1024) -> None:
        self.size = size
        self.epoch_start_step = epoch_start_step
        self._rows = np.empty((max(capacity, 1), size))
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def append(self, iterate: np.ndarray) -> None:
        iterate = np.asarray(iterate, dtype=float)
        if iterate.shape != (self.size,):
            raise ValueError(f"iterate must have shape ({self.size},), got {iterate.shape}")
        if self._count == self._rows.shape[0]:
            grown = np.empty((2 * self._rows.shape[0], self.size))
            grown[: self._count] = self._rows[: self._count]
            self._rows = grown
        self._rows[self._count] = iterate
        self._count += 1

    def as_array(self) -> np.ndarray:
        """
        Read-only view of all stored iterates.

        Returns:
            np.ndarray: Array of shape (k, m).
        """
        view = self._rows[: self._count]
        view.flags.writeable = False
        return view

    def tail(self, window: int) -> np.ndarray:
        """
        Last `window` iterates of the epoch.

        Args:
            window (int): Number of trailing rows.

        Returns:
            np.ndarray: Array of shape (min(window, k), m).
        """
        window = min(int(window), self._count)
        return self.as_array()[self._count - window :]

    def row(self, index: int) -> np.ndarray:
        """Iterate number `index` (1-based within the epoch)."""
        if not 1 <= index <= self._count:
            raise IndexError(f"iterate {index} outside 1..{self._count}")
        return self._rows[index - 1]


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    """Per-dimension R-hat, ESS and MCSE for one window."""

    rhat: np.ndarray
    ess: np.ndarray
    mcse: np.ndarray
    window: int

    @property
    def rhat_max(self) -> float:
        return float(np.max(self.rhat))

    @property
    def ess_min(self) -> float:
        return float(np.min(self.ess))


@dataclass(frozen=True)
class WindowSearchResult:
    """Outcome of the adaptive R-hat window search."""

    window: int
    rhat_max: float

    @property
    def converged(self) -> bool:
        return self.rhat_max <= RHAT_THRESHOLD


def _as_columns(series: np.ndarray) -> tuple[np.ndarray, bool]:
    array = np.asarray(series, dtype=float)
    if array.ndim == 1:
        return array[:, None], True
    if array.ndim != 2:
        raise ValueError(f"series must be 1-d or 2-d, got shape {array.shape}")
    return array, False


def _degenerate_columns(columns: np.ndarray) -> np.ndarray:
    spread = np.ptp(columns, axis=0)
    scale = np.maximum(np.abs(columns).max(axis=0), 1.0)
    return spread <= 1e-14 * scale


def is_degenerate(series: np.ndarray) -> bool:
    """
    Whether a series is constant (zero variance).
    """
    columns, _ = _as_columns(series)
    return bool(np.all(_degenerate_columns(columns)))


def autocorrelation(columns: np.ndarray) -> np.ndarray:
    """
    FFT autocorrelation of each column, biased estimator normalized by lag 0.

    Args:
        columns (np.ndarray): Array of shape (K, m).

    Returns:
        np.ndarray: Autocorrelations of shape (K, m).
    """
    n = columns.shape[0]
    centered = columns - columns.mean(axis=0)
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centered, n=size, axis=0)
    acov = fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=0)[:n] / n
    with np.errstate(invalid="ignore", divide="ignore"):
        return acov / acov[0]


def ess_columns(columns: np.ndarray, max_ratio: float = 1.0) -> np.ndarray:
    """
    Effective sample size per column with Geyer's initial positive sequence.

    Args:
        columns (np.ndarray): Array of shape (K, m).
        max_ratio (float): Upper cap on ESS / K.

    Returns:
        np.ndarray: ESS values clipped to [1, K * max_ratio]; K for constant columns.
    """
    n = columns.shape[0]
    if n < MIN_SERIES_LENGTH:
        raise ValueError(f"need at least {MIN_SERIES_LENGTH} values, got {n}")
    degenerate = _degenerate_columns(columns)
    rho = autocorrelation(np.where(degenerate, 0.0, columns))
    rho[:, degenerate] = 0.0
    rho[0] = 1.0

    # pairs (rho_{2j}, rho_{2j+1}) up to lag K/2; stop at the first negative pair sum
    n_pairs = (n // 2 + 1) // 2
    pairs = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    keep = np.cumprod(pairs >= 0.0, axis=0)
    tau = -1.0 + 2.0 * np.sum(pairs * keep, axis=0)
    with np.errstate(divide="ignore"):
        ess = np.where(tau > 0.0, n / tau, n * max_ratio)
    ess = np.clip(ess, 1.0, n * max_ratio)
    ess[degenerate] = float(n)
    return ess


def ess(series: np.ndarray, max_ratio: float = 1.0) -> float:
    """
    Effective sample size of a single series.

    Args:
        series (np.ndarray): Series of length K >= 8.
        max_ratio (float): Upper cap on ESS / K.

    Returns:
        float: ESS in [1, K * max_ratio]; K when the series is constant.
    """
    array = np.asarray(series, dtype=float)
    if array.ndim != 1:
        raise ValueError(f"series must be 1-d, got shape {array.shape}")
    if is_degenerate(array):
        logger.debug("degenerate series of length %d, ESS set to K", array.size)
    return float(ess_columns(array[:, None], max_ratio)[0])


def mcse_columns(columns: np.ndarray, ess_values: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Monte Carlo standard error of the column means, sd / sqrt(ESS).
    """
    if ess_values is None:
        ess_values = ess_columns(columns)
    return np.std(columns, axis=0, ddof=1) / np.sqrt(ess_values)


def mcse(series: np.ndarray) -> float:
    """
    Monte Carlo standard error of the series mean.

    Args:
        series (np.ndarray): Series of length K >= 8.

    Returns:
        float: Empirical sd divided by sqrt(ESS); 0 for a constant series.
    """
    columns, _ = _as_columns(series)
    return float(mcse_columns(columns)[0])


def split_rhat_columns(columns: np.ndarray) -> np.ndarray:
    """
    Split-R-hat of each column, splitting the chain into two halves.

    Args:
        columns (np.ndarray): Array of shape (K, m), K >= 4.

    Returns:
        np.ndarray: R-hat per column; 1.0 where within-half variance is zero.
    """
    n = columns.shape[0] // 2
    if n < 2:
        raise ValueError(f"need at least 4 values, got {columns.shape[0]}")
    first, second = columns[:n], columns[n : 2 * n]
    within = 0.5 * (np.var(first, axis=0, ddof=1) + np.var(second, axis=0, ddof=1))
    means = np.stack([first.mean(axis=0), second.mean(axis=0)])
    between = n * np.var(means, axis=0, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = np.sqrt(var_plus / within)
    return np.where(within > 0.0, rhat, 1.0)


def split_rhat(series: np.ndarray) -> float:
    """
    Split-R-hat of a single series; the last value is dropped when K is odd.

    Args:
        series (np.ndarray): Series of length K >= 4.

    Returns:
        float: R-hat, 1.0 for degenerate halves.
    """
    columns, _ = _as_columns(series)
    return float(split_rhat_columns(columns)[0])


def diagnostics_report(window: np.ndarray) -> DiagnosticsReport:
    """
    Compute R-hat, ESS and MCSE for every dimension of a window of iterates.

    Args:
        window (np.ndarray): Array of shape (W, m).

    Returns:
        DiagnosticsReport: Per-dimension diagnostics.
    """
    columns, _ = _as_columns(window)
    ess_values = ess_columns(columns)
    return DiagnosticsReport(
        rhat=split_rhat_columns(columns),
        ess=ess_values,
        mcse=mcse_columns(columns, ess_values),
        window=columns.shape[0],
    )


def _window_grid(lower: int, upper: int, count: int = 5) -> list[int]:
    grid = np.linspace(lower, upper, count)
    return sorted({int(round(value)) for value in grid})


def rhat_max_window_search(
    history: IterateHistory, w_min: int
) -> Optional[WindowSearchResult]:
    """
    Find the trailing window in [W_min, 0.95 k] minimizing max_i R-hat_i.

    Both grid endpoints are included.

    Args:
        history (IterateHistory): Iterates of the current epoch.
        w_min (int): Minimum window size.

    Returns:
        WindowSearchResult | None: Best window, or None while k < W_min / 0.95.
    """
    k = len(history)
    upper = math.floor(0.95 * k)
    if upper < w_min or w_min < 4:
        return None
    best: Optional[WindowSearchResult] = None
    for window in _window_grid(w_min, upper):
        value = float(np.max(split_rhat_columns(history.tail(window))))
        if best is None or value < best.rhat_max:
            best = WindowSearchResult(window=window, rhat_max=value)
    return best


def sasa_invariant(
    iterates: np.ndarray, directions: np.ndarray, gamma: float, multivariate: bool = False
) -> np.ndarray:
    """
    Stationarity invariant 2 <d_k, lambda_k> - gamma ||d_k||^2.

    Args:
        iterates (np.ndarray): Iterates lambda_k at which d_k was computed, (K, m).
        directions (np.ndarray): Descent directions d_k, (K, m).
        gamma (float): Fixed learning rate.
        multivariate (bool): Return the component-wise invariant 2 d * lambda - gamma d * d.

    Returns:
        np.ndarray: Shape (K,) or (K, m) when multivariate.
    """
    iterates = np.asarray(iterates, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if iterates.shape != directions.shape:
        raise ValueError(f"shape mismatch: {iterates.shape} vs {directions.shape}")
    components = 2.0 * directions * iterates - gamma * directions * directions
    return components if multivariate else components.sum(axis=1)


def sasa_plus_converged(
    iterates: np.ndarray,
    directions: np.ndarray,
    gamma: float,
    alpha: float = 0.05,
    min_ess: int = 100,
    multivariate: bool = False,
) -> bool:
    """
    Adaptive SASA+ test that the invariant has mean zero.

    The window is the grid value in [N_min, 0.95 k] with the largest ESS; the
    component-wise variant uses the median ESS and Bonferroni size alpha / m.

    Args:
        iterates (np.ndarray): Pre-step iterates, (k, m).
        directions (np.ndarray): Directions computed at those iterates, (k, m).
        gamma (float): Fixed learning rate.
        alpha (float): Test size.
        min_ess (int): Minimum effective sample size N_min.
        multivariate (bool): Use the component-wise invariant.

    Returns:
        bool: True when the z-test fails to reject stationarity.
    """
    invariant = sasa_invariant(iterates, directions, gamma, multivariate)
    columns, _ = _as_columns(invariant)
    k = columns.shape[0]
    upper = math.floor(0.95 * k)
    lower = max(min_ess, MIN_SERIES_LENGTH)
    if upper < lower:
        return False

    best_window, best_ess, best_values = 0, -1.0, None
    for window in _window_grid(lower, upper):
        ess_values = ess_columns(columns[k - window :])
        score = float(np.median(ess_values))
        if score > best_ess:
            best_window, best_ess, best_values = window, score, ess_values
    if best_values is None or float(np.min(best_values)) < min_ess:
        return False

    window = columns[k - best_window :]
    sd = np.std(window, axis=0, ddof=1)
    stderr = sd / np.sqrt(best_values)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(stderr > 0.0, window.mean(axis=0) / stderr, 0.0)
    p_values = 2.0 * stats.norm.sf(np.abs(z))
    size = alpha / columns.shape[1]
    return bool(np.all(p_values >= size))


def distance_checkpoints(q: float, upto: int, first: int = 1) -> list[int]:
    """
    Checkpoints ceil(q^n) between `first` and `upto` inclusive.
    """
    points: list[int] = []
    n = 0
    while True:
        point = math.ceil(q**n)
        if point > upto:
            return points
        if point >= first and (not points or point > points[-1]):
            points.append(point)
        n += 1


def distance_slope(history: IterateHistory, initial: np.ndarray, k: int, q: float) -> float:
    """
    Log-log slope of ||lambda_k - lambda_0||^2 between iterations k/q and k.

    Args:
        history (IterateHistory): Iterates of the current epoch.
        initial (np.ndarray): Iterate lambda_0 at the start of the epoch.
        k (int): Checkpoint iteration.
        q (float): Checkpoint ratio.

    Returns:
        float: Slope statistic S.
    """
    earlier = max(1, math.ceil(k / q))
    if earlier >= k:
        raise ValueError(f"checkpoint {k} too small for ratio {q}")
    far = max(float(np.sum((history.row(k) - initial) ** 2)), NUMERICAL_EPS)
    near = max(float(np.sum((history.row(earlier) - initial) ** 2)), NUMERICAL_EPS)
    return (math.log(far) - math.log(near)) / (math.log(k) - math.log(earlier))


def distance_based_converged(
    history: IterateHistory,
    initial: np.ndarray,
    q: float = 2.0,
    thresh: float = 0.5,
    first_checkpoint: int = 8,
) -> bool:
    """
    Distance-based detector evaluated at the latest checkpoint ceil(q^n) <= k.

    Args:
        history (IterateHistory): Iterates of the current epoch.
        initial (np.ndarray): Iterate lambda_0 at the start of the epoch.
        q (float): Checkpoint ratio, > 1.
        thresh (float): Slope threshold in (0, 2].
        first_checkpoint (int): Smallest k/q at which the slope is trusted.

    Returns:
        bool: True when the slope S falls below thresh.
    """
    if q <= 1.0:
        raise ValueError(f"q must exceed 1, got {q}")
    points = distance_checkpoints(q, len(history), first=math.ceil(q * first_checkpoint))
    if not points:
        return False
    return distance_slope(history, np.asarray(initial, dtype=float), points[-1], q) < thresh
