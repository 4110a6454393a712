"""Database models for stored experiment runs."""

from __future__ import annotations

from datetime import datetime
from typing import Optional

from sqlalchemy import Boolean, DateTime, Float, ForeignKey, Integer, String, func
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column, relationship


class Base(DeclarativeBase):
    """Base class for SQLAlchemy models."""


class RunRecord(Base):
    """One experiment summary row."""

    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    config_name: Mapped[str] = mapped_column(String, index=True)
    algorithm: Mapped[str] = mapped_column(String, index=True)
    target: Mapped[str] = mapped_column(String)
    structure: Mapped[str] = mapped_column(String, default="")
    dim: Mapped[int] = mapped_column(Integer)
    seed: Mapped[int] = mapped_column(Integer)
    terminal_step: Mapped[int] = mapped_column(Integer)
    sqrt_skl: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    relative_mean_error: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    relative_sd_error: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    success: Mapped[bool] = mapped_column(Boolean, default=False)
    terminated_reason: Mapped[str] = mapped_column(String)
    wall_time: Mapped[float] = mapped_column(Float)
    output_dir: Mapped[Optional[str]] = mapped_column(String, nullable=True)
    created_at: Mapped[datetime] = mapped_column(DateTime, server_default=func.now())

    epochs: Mapped[list[EpochRow]] = relationship(
        back_populates="run", cascade="all, delete-orphan", order_by="EpochRow.t"
    )


class EpochRow(Base):
    """Per-epoch learning-rate record of a stored run."""

    __tablename__ = "epochs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id"), index=True)
    t: Mapped[int] = mapped_column(Integer)
    gamma: Mapped[float] = mapped_column(Float)
    K_t: Mapped[int] = mapped_column(Integer)
    delta_t: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    rskl_hat: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    ri_hat: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    inefficiency_hat: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    terminated: Mapped[bool] = mapped_column(Boolean, default=False)

    run: Mapped[RunRecord] = relationship(back_populates="epochs")
