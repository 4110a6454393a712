"""Pydantic models for run configuration, target specs and trace records."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services.optimizers import OptimizerKind

TRACE_SCHEMA_VERSION = 1

GaussianStructure = Literal["identity", "diag_nonidentity", "uniform_corr", "banded_corr"]


class GaussianTargetSpec(BaseModel):
    """Zero-mean Gaussian benchmark target N(0, V)."""

    model_config = ConfigDict(frozen=True)

    d: int = Field(gt=0)
    structure: GaussianStructure = "identity"
    corr: float = Field(default=0.8, gt=0.0, lt=1.0)

    @property
    def is_diagonal(self) -> bool:
        return self.structure in {"identity", "diag_nonidentity"}


class RunConfig(BaseModel):
    """All tuning parameters of an experiment, with the published defaults."""

    model_config = ConfigDict(extra="forbid")

    # target
    target: Literal["gaussian", "logistic"] = "gaussian"
    structure: GaussianStructure = "identity"
    dim: int = Field(default=100, gt=0)
    corr: float = Field(default=0.8, gt=0.0, lt=1.0)
    n_obs: int = Field(default=100, ge=0)
    prior_scale: float = Field(default=10.0, gt=0.0)

    # algorithm
    family: Literal["mean_field", "full_rank"] = "mean_field"
    optimizer: OptimizerKind = OptimizerKind.AVG_ADAM
    algorithm: Literal["raabbvi", "faso", "fixed_lr_baseline"] = "raabbvi"
    detector: Literal["rhat", "sasa_plus", "distance"] = "rhat"
    cost_model: Literal["op_count", "wall_clock"] = "op_count"
    warm_start: bool = False

    gamma0: float = Field(default=0.3, gt=0.0)
    w_min: int = Field(default=200, gt=0)
    xi: float = Field(default=0.1, gt=0.0)
    tau: float = Field(default=1.0, gt=0.0)
    epsilon0: Optional[float] = Field(default=None, gt=0.0)
    epsilon_decay: float = Field(default=1.0, gt=0.0, le=1.0)
    rho: float = Field(default=0.5, gt=0.0, lt=1.0)
    num_samples: int = Field(default=10, gt=0)
    k0: int = Field(default=1000, gt=0)
    k_max: int = Field(default=100_000, gt=0)
    seed: int = Field(default=0, ge=0)
    fixed_gamma: float = Field(default=0.1, gt=0.0)
    eval_every: int = Field(default=200, gt=0)
    window_fraction: float = Field(default=0.2, gt=0.0, le=1.0)

    # detectors
    sasa_alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    sasa_min_ess: int = Field(default=100, gt=0)
    distance_q: float = Field(default=2.0, gt=1.0)
    distance_thresh: float = Field(default=0.5, gt=0.0, le=2.0)

    # optimizer hypers
    beta: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps_num: float = Field(default=1e-8, gt=0.0)
    adagrad_window: int = Field(default=10, gt=0)

    # regression sampler
    sampler_draws: int = Field(default=5000, ge=100)
    sampler_chains: int = Field(default=4, ge=2)

    output: str = "runs"

    @field_validator("tau", mode="before")
    @classmethod
    def _parse_infinite_tau(cls, value: object) -> object:
        """
        Accept "inf" so the inefficiency rule can be disabled.

        Args:
            value (object): Incoming value.

        Returns:
            object: Value passed on to float validation.
        """
        if isinstance(value, str) and value.strip().lower() in {"inf", "infinity"}:
            return float("inf")
        return value

    @model_validator(mode="after")
    def _epsilon_tracks_xi(self) -> RunConfig:
        if self.epsilon0 is None:
            self.epsilon0 = self.xi
        return self

    def target_spec(self) -> GaussianTargetSpec:
        """
        Build the Gaussian target spec from the flat keys.

        Returns:
            GaussianTargetSpec: Target spec.
        """
        return GaussianTargetSpec(d=self.dim, structure=self.structure, corr=self.corr)

    def epsilon_for_epoch(self, t: int) -> float:
        return float(self.epsilon0) * self.epsilon_decay**t


class CheckRecord(BaseModel):
    """One convergence or MCSE check inside a fixed-learning-rate epoch."""

    kind: Literal["check"] = "check"
    epoch: int
    step: int
    phase: Literal["convergence", "mcse"]
    rhat_max: Optional[float] = None
    W_opt: Optional[int] = None
    mean_mcse: Optional[float] = None
    ess_min: Optional[float] = None
    passed: bool = False


class EpochTraceRecord(BaseModel):
    """Per-epoch summary of the learning-rate schedule."""

    kind: Literal["epoch"] = "epoch"
    t: int
    gamma: float
    K_t: int
    delta_t: Optional[float] = None
    log_C_mean: Optional[float] = None
    kappa_mean: Optional[float] = None
    rskl_hat: Optional[float] = None
    ri_hat: Optional[float] = None
    inefficiency_hat: Optional[float] = None
    terminated: bool = False


class BaselineRecord(BaseModel):
    """Iterate-average accuracy of a fixed-learning-rate run at one step."""

    kind: Literal["baseline"] = "baseline"
    step: int
    window: int
    sqrt_skl: Optional[float] = None
    relative_mean_error: Optional[float] = None
    relative_sd_error: Optional[float] = None


class SummaryRow(BaseModel):
    """One CSV summary row per experiment."""

    config_name: str
    algorithm: str
    target: str
    structure: str
    dim: int
    seed: int
    terminal_step: int
    sqrt_skl: Optional[float] = None
    relative_mean_error: Optional[float] = None
    relative_sd_error: Optional[float] = None
    success: bool
    terminated_reason: str
    wall_time: float


class RunListResponse(BaseModel):
    """Stored runs returned by the report command."""

    total_runs: int
    results: list[SummaryRow]
