"""Metric streams: JSONL trace, CSV summary and accuracy measures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from types import TracebackType
from typing import Any, Iterable, Optional

import numpy as np
from pydantic import BaseModel

from app.schemas import TRACE_SCHEMA_VERSION, SummaryRow
from app.services.variational_family import (
    FullRankGaussianParams,
    VariationalParams,
    skl,
)

SUMMARY_FIELDS = list(SummaryRow.model_fields)


def _finite_or_none(value: Any) -> Any:
    """
    Replace NaN and infinities by None so every line is strict JSON.

    Args:
        value (Any): Scalar, list or dict from a record dump.

    Returns:
        Any: Same structure with non-finite floats nulled.
    """
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _finite_or_none(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_finite_or_none(item) for item in value]
    return value


def record_line(record: BaseModel | dict[str, Any]) -> str:
    """
    Serialize one trace record as a JSON line without a trailing newline.
    """
    payload = record.model_dump() if isinstance(record, BaseModel) else record
    return json.dumps(_finite_or_none(payload), allow_nan=False)


class TraceWriter:
    """
    Append-only JSONL trace, flushed after every record.

    The first line is the schema header {"schema": 1}.
    """

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self._handle = None
        self.records_written = 0

    def __enter__(self) -> TraceWriter:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", encoding="utf-8", newline="\n")
        self._write_line(record_line({"schema": TRACE_SCHEMA_VERSION}))
        return self

    def __exit__(
        self,
        exc_type: Optional[type[BaseException]],
        exc: Optional[BaseException],
        traceback: Optional[TracebackType],
    ) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __call__(self, record: BaseModel) -> None:
        self.write(record)

    def _write_line(self, line: str) -> None:
        if self._handle is None:
            raise RuntimeError("trace writer is not open")
        self._handle.write(line + "\n")
        self._handle.flush()

    def write(self, record: BaseModel) -> None:
        """
        Append one record.

        Args:
            record (BaseModel): Check, epoch or baseline record.
        """
        self._write_line(record_line(record))
        self.records_written += 1


def read_trace(path: Path) -> list[dict[str, Any]]:
    """
    Parse a JSONL trace, header included.

    Args:
        path (Path): Trace file.

    Returns:
        list[dict[str, Any]]: One dict per line.
    """
    with Path(path).open("r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def write_summary(path: Path, rows: Iterable[SummaryRow]) -> None:
    """
    Write summary rows as CSV; None values become empty cells.

    Args:
        path (Path): Output CSV path.
        rows (Iterable[SummaryRow]): Rows to write.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(_finite_or_none(row.model_dump()))


def read_summary(path: Path) -> list[dict[str, str]]:
    """
    Read a summary CSV back as string-valued dicts.
    """
    with Path(path).open("r", newline="", encoding="utf-8") as csv_file:
        return list(csv.DictReader(csv_file))


def moments(params: VariationalParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean and marginal standard deviations of a variational approximation.

    Args:
        params (VariationalParams): Approximation.

    Returns:
        tuple[np.ndarray, np.ndarray]: (mean, sd) vectors.
    """
    if isinstance(params, FullRankGaussianParams):
        return params.mu, np.sqrt(np.sum(params.scale_tril**2, axis=1))
    return params.tau, params.sigma


def relative_mean_error(mean: np.ndarray, sd: np.ndarray, mean_hat: np.ndarray) -> float:
    """
    ||(mu - mu_hat) / sigma||_2.
    """
    return float(np.linalg.norm((mean - mean_hat) / sd))


def relative_sd_error(sd: np.ndarray, sd_hat: np.ndarray) -> float:
    """
    ||sigma_hat / sigma - 1||_2.
    """
    return float(np.linalg.norm(sd_hat / sd - 1.0))


def sqrt_skl(reference: VariationalParams, approximation: VariationalParams) -> float:
    """
    Square root of the symmetrized KL divergence between two family members.
    """
    return math.sqrt(skl(reference, approximation))


def accuracy_metrics(
    approximation: VariationalParams,
    reference: Optional[VariationalParams],
    mean: Optional[np.ndarray],
    sd: Optional[np.ndarray],
) -> dict[str, Optional[float]]:
    """
    Accuracy of an approximation against whatever ground truth is available.

    Args:
        approximation (VariationalParams): Fitted approximation.
        reference (Optional[VariationalParams]): Optimal approximation q*, when known.
        mean (Optional[np.ndarray]): Posterior mean, when known.
        sd (Optional[np.ndarray]): Posterior standard deviations, when known.

    Returns:
        dict[str, Optional[float]]: sqrt_skl, relative_mean_error, relative_sd_error.
    """
    metrics: dict[str, Optional[float]] = {
        "sqrt_skl": None,
        "relative_mean_error": None,
        "relative_sd_error": None,
    }
    if reference is not None:
        metrics["sqrt_skl"] = sqrt_skl(reference, approximation)
    if mean is not None and sd is not None:
        mean_hat, sd_hat = moments(approximation)
        metrics["relative_mean_error"] = relative_mean_error(mean, sd, mean_hat)
        metrics["relative_sd_error"] = relative_sd_error(sd, sd_hat)
    return metrics
