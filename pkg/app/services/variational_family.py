"""Gaussian variational families: parameterization, sampling, entropy and KL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular

MEAN_FIELD = "mean_field"
FULL_RANK = "full_rank"

_HALF_LOG_2PI_E = 0.5 * (1.0 + math.log(2.0 * math.pi))
# exp(600) ~ 3.8e260; the sum over up to 1e40 coordinates stays below float max.
_LOG_TERM_CAP = 600.0


def _as_vector(values: np.ndarray | list[float], name: str) -> np.ndarray:
    """
    Coerce input into a finite 1-d float array.

    Args:
        values (np.ndarray | list[float]): Raw values.
        name (str): Field name used in error messages.

    Returns:
        np.ndarray: Float vector.

    Raises:
        ValueError: When the values are not a finite 1-d vector.
    """
    array = np.asarray(values, dtype=float)
    if array.ndim == 0:
        array = array.reshape(1)
    if array.ndim != 1 or array.size == 0:
        raise ValueError(f"{name} must be a non-empty vector, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} must be finite")
    return array


@dataclass(frozen=True, eq=False)
class MeanFieldGaussianParams:
    """N(tau, diag exp(2 psi)) with psi the log standard deviations."""

    tau: np.ndarray
    psi: np.ndarray

    def __post_init__(self) -> None:
        tau = _as_vector(self.tau, "tau")
        psi = _as_vector(self.psi, "psi")
        if tau.shape != psi.shape:
            raise ValueError(f"tau and psi lengths differ: {tau.size} != {psi.size}")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "psi", psi)

    family = MEAN_FIELD

    @property
    def dim(self) -> int:
        return int(self.tau.size)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.psi)

    def to_vector(self) -> np.ndarray:
        """
        Flatten into lambda = (tau, psi).

        Returns:
            np.ndarray: Vector of length 2d.
        """
        return np.concatenate([self.tau, self.psi])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> MeanFieldGaussianParams:
        """
        Rebuild parameters from a flat (tau, psi) vector.

        Args:
            vector (np.ndarray): Vector of even length 2d.

        Returns:
            MeanFieldGaussianParams: Parameters.
        """
        vector = np.asarray(vector, dtype=float)
        if vector.ndim != 1 or vector.size % 2:
            raise ValueError(f"mean-field vector must have even length, got {vector.shape}")
        dim = vector.size // 2
        return cls(tau=vector[:dim], psi=vector[dim:])


@dataclass(frozen=True, eq=False)
class FullRankGaussianParams:
    """N(mu, L L^T) with L lower triangular and a strictly positive diagonal."""

    mu: np.ndarray
    scale_tril: np.ndarray

    def __post_init__(self) -> None:
        mu = _as_vector(self.mu, "mu")
        scale_tril = np.asarray(self.scale_tril, dtype=float)
        if scale_tril.shape != (mu.size, mu.size):
            raise ValueError(
                f"scale_tril must be {mu.size}x{mu.size}, got {scale_tril.shape}"
            )
        if not np.all(np.isfinite(scale_tril)):
            raise ValueError("scale_tril must be finite")
        if np.any(np.triu(scale_tril, k=1) != 0.0):
            raise ValueError("scale_tril must be lower triangular")
        if np.any(np.diag(scale_tril) <= 0.0):
            raise ValueError("scale_tril must have a strictly positive diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "scale_tril", scale_tril)

    family = FULL_RANK

    @property
    def dim(self) -> int:
        return int(self.mu.size)

    @property
    def covariance(self) -> np.ndarray:
        return self.scale_tril @ self.scale_tril.T

    def to_vector(self) -> np.ndarray:
        """
        Flatten into (mu, row-major strictly-lower L, log diag L).

        Returns:
            np.ndarray: Vector of length d + d(d+1)/2.
        """
        rows, cols = np.tril_indices(self.dim, k=-1)
        return np.concatenate(
            [self.mu, self.scale_tril[rows, cols], np.log(np.diag(self.scale_tril))]
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray, dim: int) -> FullRankGaussianParams:
        """
        Rebuild parameters from the unconstrained flat layout.

        Args:
            vector (np.ndarray): Flat vector produced by `to_vector`.
            dim (int): Dimension d.

        Returns:
            FullRankGaussianParams: Parameters.
        """
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (vector_size(FULL_RANK, dim),):
            raise ValueError(f"full-rank vector for d={dim} has wrong shape {vector.shape}")
        n_lower = dim * (dim - 1) // 2
        scale_tril = np.zeros((dim, dim))
        rows, cols = np.tril_indices(dim, k=-1)
        scale_tril[rows, cols] = vector[dim : dim + n_lower]
        scale_tril[np.diag_indices(dim)] = np.exp(vector[dim + n_lower :])
        return cls(mu=vector[:dim], scale_tril=scale_tril)


VariationalParams = Union[MeanFieldGaussianParams, FullRankGaussianParams]


def vector_size(family: str, dim: int) -> int:
    """
    Length m of the flat parameter vector.

    Args:
        family (str): "mean_field" or "full_rank".
        dim (int): Dimension d.

    Returns:
        int: Number of unconstrained parameters.
    """
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    if family == MEAN_FIELD:
        return 2 * dim
    if family == FULL_RANK:
        return dim + dim * (dim + 1) // 2
    raise ValueError(f"unknown variational family: {family}")


def params_from_vector(family: str, vector: np.ndarray, dim: int) -> VariationalParams:
    """
    Rebuild a parameter object from its flat vector.

    Args:
        family (str): "mean_field" or "full_rank".
        vector (np.ndarray): Flat parameter vector.
        dim (int): Dimension d.

    Returns:
        VariationalParams: Parameter object.
    """
    if family == MEAN_FIELD:
        params = MeanFieldGaussianParams.from_vector(vector)
        if params.dim != dim:
            raise ValueError(f"expected d={dim}, got d={params.dim}")
        return params
    if family == FULL_RANK:
        return FullRankGaussianParams.from_vector(vector, dim)
    raise ValueError(f"unknown variational family: {family}")


def initial_params(family: str, dim: int) -> VariationalParams:
    """
    Standard normal starting point N(0, I) in the requested family.
    """
    if family == MEAN_FIELD:
        return MeanFieldGaussianParams(tau=np.zeros(dim), psi=np.zeros(dim))
    if family == FULL_RANK:
        return FullRankGaussianParams(mu=np.zeros(dim), scale_tril=np.eye(dim))
    raise ValueError(f"unknown variational family: {family}")


def as_full_rank(params: VariationalParams) -> FullRankGaussianParams:
    """
    View any member as a full-rank Gaussian.

    Args:
        params (VariationalParams): Parameters.

    Returns:
        FullRankGaussianParams: Same distribution in full-rank form.
    """
    if isinstance(params, FullRankGaussianParams):
        return params
    return FullRankGaussianParams(mu=params.tau, scale_tril=np.diag(params.sigma))


def sample(params: VariationalParams, noise: np.ndarray) -> np.ndarray:
    """
    Reparameterization transform of standard-normal noise.

    Args:
        params (VariationalParams): Parameters.
        noise (np.ndarray): Noise of shape (d,) or (M, d).

    Returns:
        np.ndarray: Draws theta with the same shape as noise.

    Raises:
        ValueError: When the trailing dimension of noise is not d.
    """
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 0 or noise.shape[-1] != params.dim:
        raise ValueError(f"noise must have trailing dimension {params.dim}, got {noise.shape}")
    if isinstance(params, MeanFieldGaussianParams):
        return params.tau + params.sigma * noise
    return params.mu + noise @ params.scale_tril.T


def entropy(params: VariationalParams) -> float:
    """
    Analytic differential entropy.

    Args:
        params (VariationalParams): Parameters.

    Returns:
        float: Entropy in nats.
    """
    if isinstance(params, MeanFieldGaussianParams):
        log_scale = float(np.sum(params.psi))
    else:
        log_scale = float(np.sum(np.log(np.diag(params.scale_tril))))
    return log_scale + params.dim * _HALF_LOG_2PI_E


def _check_compatible(p: VariationalParams, q: VariationalParams) -> None:
    if type(p) is not type(q):
        raise ValueError(f"family mismatch: {p.family} vs {q.family}")
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def kl_to(p: VariationalParams, q: VariationalParams) -> float:
    """
    Closed-form KL(p || q) between two members of the same family.

    Args:
        p (VariationalParams): First distribution.
        q (VariationalParams): Second distribution.

    Returns:
        float: Nonnegative divergence. Mean-field terms are computed in log space
        and capped at exp(_LOG_TERM_CAP), so the result stays finite for any
        finite parameters. The full-rank form is exact within float64 range.
    """
    _check_compatible(p, q)
    if isinstance(p, MeanFieldGaussianParams):
        log_var_ratio = np.minimum(2.0 * (p.psi - q.psi), _LOG_TERM_CAP)
        with np.errstate(divide="ignore"):
            log_mean_term = 2.0 * (np.log(np.abs(p.tau - q.tau)) - q.psi)
        log_mean_term = np.minimum(log_mean_term, _LOG_TERM_CAP)
        value = 0.5 * np.sum(np.exp(log_var_ratio) + np.exp(log_mean_term) - 1.0) + np.sum(
            q.psi - p.psi
        )
        return max(float(value), 0.0)

    # Cholesky-based: tr(S_q^-1 S_p) = ||L_q^-1 L_p||_F^2, no explicit inverse.
    scaled = solve_triangular(q.scale_tril, p.scale_tril, lower=True)
    offset = solve_triangular(q.scale_tril, q.mu - p.mu, lower=True)
    log_det_q = 2.0 * np.sum(np.log(np.diag(q.scale_tril)))
    log_det_p = 2.0 * np.sum(np.log(np.diag(p.scale_tril)))
    value = 0.5 * (
        np.sum(scaled**2) + np.sum(offset**2) - p.dim + log_det_q - log_det_p
    )
    return max(float(value), 0.0)


def skl(p: VariationalParams, q: VariationalParams) -> float:
    """
    Symmetrized KL divergence KL(p || q) + KL(q || p).

    Args:
        p (VariationalParams): First distribution.
        q (VariationalParams): Second distribution.

    Returns:
        float: Nonnegative, symmetric divergence.
    """
    return kl_to(p, q) + kl_to(q, p)
