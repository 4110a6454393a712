"""Persist experiment summaries and epoch records, and list them back."""

from __future__ import annotations

import math
from typing import Iterable, Optional

from sqlalchemy import func, select
from sqlalchemy.orm import Session

from app.models import EpochRow, RunRecord
from app.schemas import EpochTraceRecord, SummaryRow


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return value


def save_run(
    session: Session,
    summary: SummaryRow,
    epochs: Iterable[EpochTraceRecord] = (),
    output_dir: Optional[str] = None,
) -> RunRecord:
    """
    Store one experiment and its epochs.

    Args:
        session (Session): SQLAlchemy session.
        summary (SummaryRow): Summary row of the experiment.
        epochs (Iterable[EpochTraceRecord]): Per-epoch records, possibly empty.
        output_dir (Optional[str]): Where the trace files were written.

    Returns:
        RunRecord: The committed row.
    """
    fields = summary.model_dump()
    for name in ("sqrt_skl", "relative_mean_error", "relative_sd_error"):
        fields[name] = _finite(fields[name])
    run = RunRecord(**fields, output_dir=output_dir)
    for epoch in epochs:
        run.epochs.append(
            EpochRow(
                t=epoch.t,
                gamma=epoch.gamma,
                K_t=epoch.K_t,
                delta_t=_finite(epoch.delta_t),
                rskl_hat=_finite(epoch.rskl_hat),
                ri_hat=_finite(epoch.ri_hat),
                inefficiency_hat=_finite(epoch.inefficiency_hat),
                terminated=epoch.terminated,
            )
        )
    session.add(run)
    session.commit()
    return run


def list_runs(
    session: Session,
    algorithm: Optional[str] = None,
    config_name: Optional[str] = None,
    limit: Optional[int] = None,
) -> list[SummaryRow]:
    """
    Stored runs, newest first.

    Args:
        session (Session): SQLAlchemy session.
        algorithm (Optional[str]): Keep only this algorithm when set.
        config_name (Optional[str]): Keep only this config name when set.
        limit (Optional[int]): Maximum number of rows.

    Returns:
        list[SummaryRow]: Summary rows.
    """
    query = select(RunRecord)
    if algorithm:
        query = query.where(RunRecord.algorithm == algorithm)
    if config_name:
        query = query.where(RunRecord.config_name == config_name)
    query = query.order_by(RunRecord.id.desc())
    if limit:
        query = query.limit(limit)
    rows = session.execute(query).scalars().all()
    names = SummaryRow.model_fields
    return [SummaryRow(**{name: getattr(row, name) for name in names}) for row in rows]


def count_epochs(session: Session, run_id: int) -> int:
    """
    Number of stored epochs for a run.
    """
    return int(
        session.execute(select(func.count()).select_from(EpochRow).where(EpochRow.run_id == run_id)).scalar_one()
    )
