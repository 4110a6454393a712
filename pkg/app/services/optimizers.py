"""Fixed-learning-rate descent directions: SGD, RMSProp, Adam and variants."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from app.services.variational_family import MeanFieldGaussianParams


class OptimizerKind(str, Enum):
    """Supported descent-direction engines."""

    SGD = "sgd"
    RMSPROP = "rmsprop"
    ADAM = "adam"
    AVG_RMSPROP = "avg_rmsprop"
    AVG_ADAM = "avg_adam"
    NGD = "ngd"
    WINDOWED_ADAGRAD = "windowed_adagrad"


class OptimizerError(ValueError):
    """Raised when a gradient is not finite; the caller aborts the epoch."""


@dataclass(frozen=True)
class OptimizerHyper:
    """Decay rates, numerical stabilizer and Adagrad window length."""

    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    window: int = 10


@dataclass
class OptimizerState:
    """Moment accumulators carried between steps of one chain."""

    kind: OptimizerKind
    size: int
    hyper: OptimizerHyper = field(default_factory=OptimizerHyper)
    step_count: int = 0
    grad_ema: Optional[np.ndarray] = None
    sq_grad: Optional[np.ndarray] = None
    window_buffer: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        self.kind = OptimizerKind(self.kind)
        if self.grad_ema is None:
            self.grad_ema = np.zeros(self.size)
        if self.sq_grad is None:
            self.sq_grad = np.zeros(self.size)
        if self.window_buffer.maxlen != self.hyper.window:
            self.window_buffer = deque(self.window_buffer, maxlen=self.hyper.window)


def init_optimizer_state(
    kind: OptimizerKind | str, size: int, hyper: OptimizerHyper | None = None
) -> OptimizerState:
    """
    Create a fresh optimizer state.

    Args:
        kind (OptimizerKind | str): Optimizer name.
        size (int): Parameter vector length m.
        hyper (OptimizerHyper | None): Hyperparameters, defaults when None.

    Returns:
        OptimizerState: State with zeroed accumulators.
    """
    return OptimizerState(kind=OptimizerKind(kind), size=size, hyper=hyper or OptimizerHyper())


def _natural_gradient(grad: np.ndarray, params: object) -> np.ndarray:
    """
    Precondition by the inverse Fisher information of N(tau, diag e^{2 psi}).

    In (tau, psi) coordinates the Fisher matrix is diag(e^{-2 psi}, 2), which is
    what the expectation-parameter identity reduces to for this family.

    Args:
        grad (np.ndarray): Gradient in (tau, psi) layout.
        params (object): Mean-field parameters at which grad was taken.

    Returns:
        np.ndarray: Natural-gradient direction.
    """
    if not isinstance(params, MeanFieldGaussianParams):
        raise OptimizerError("natural gradient requires mean-field Gaussian parameters")
    d = params.dim
    variance = np.exp(2.0 * params.psi)
    return np.concatenate([variance * grad[:d], 0.5 * grad[d:]])


def descent_direction(
    state: OptimizerState, grad: np.ndarray, params: object = None
) -> tuple[np.ndarray, OptimizerState]:
    """
    Compute the descent direction d_k and the updated state.

    Args:
        state (OptimizerState): Current state; left untouched.
        grad (np.ndarray): Stochastic gradient of length m.
        params (object): Variational parameters, needed only for NGD.

    Returns:
        tuple[np.ndarray, OptimizerState]: Direction and new state.

    Raises:
        OptimizerError: When grad contains NaN or Inf.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (state.size,):
        raise ValueError(f"gradient must have shape ({state.size},), got {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(f"non-finite gradient at step {state.step_count + 1}")

    hyper = state.hyper
    k = state.step_count + 1
    grad_ema = state.grad_ema
    sq_grad = state.sq_grad
    window_buffer = state.window_buffer
    squared = grad * grad
    kind = state.kind

    if kind is OptimizerKind.SGD:
        direction = grad
    elif kind is OptimizerKind.NGD:
        direction = _natural_gradient(grad, params)
    elif kind is OptimizerKind.RMSPROP:
        sq_grad = hyper.beta * sq_grad + (1.0 - hyper.beta) * squared
        direction = grad / (np.sqrt(sq_grad) + hyper.eps_num)
    elif kind is OptimizerKind.AVG_RMSPROP:
        # beta_k = 1 - 1/k, so sq_grad is the running mean of squared gradients
        sq_grad = sq_grad + (squared - sq_grad) / k
        direction = grad / (np.sqrt(sq_grad) + hyper.eps_num)
    elif kind in (OptimizerKind.ADAM, OptimizerKind.AVG_ADAM):
        grad_ema = hyper.beta1 * grad_ema + (1.0 - hyper.beta1) * grad
        first = grad_ema / (1.0 - hyper.beta1**k)
        if kind is OptimizerKind.ADAM:
            sq_grad = hyper.beta2 * sq_grad + (1.0 - hyper.beta2) * squared
            second = sq_grad / (1.0 - hyper.beta2**k)
        else:
            sq_grad = sq_grad + (squared - sq_grad) / k
            second = sq_grad
        direction = first / (np.sqrt(second) + hyper.eps_num)
    else:
        window_buffer = deque(window_buffer, maxlen=hyper.window)
        window_buffer.append(squared)
        sq_grad = np.mean(window_buffer, axis=0)
        direction = grad / (np.sqrt(sq_grad) + hyper.eps_num)

    new_state = replace(
        state,
        step_count=k,
        grad_ema=grad_ema,
        sq_grad=sq_grad,
        window_buffer=window_buffer,
    )
    return direction, new_state


def step(params: np.ndarray, direction: np.ndarray, gamma: float) -> np.ndarray:
    """
    Apply lambda_{k+1} = lambda_k - gamma d_k.

    Args:
        params (np.ndarray): Current flat parameters.
        direction (np.ndarray): Descent direction.
        gamma (float): Learning rate.

    Returns:
        np.ndarray: Updated parameters.
    """
    params = np.asarray(params, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if params.shape != direction.shape:
        raise ValueError(f"shape mismatch: {params.shape} vs {direction.shape}")
    return params - gamma * direction
