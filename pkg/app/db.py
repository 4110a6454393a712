"""Location and sessions of the SQLite run store."""

from __future__ import annotations

import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session

from app.models import Base

logger = logging.getLogger(__name__)

DB_PATH_ENV = "RAABBVI_DB_PATH"
DEFAULT_DB_PATH = Path(__file__).resolve().parents[1] / "data" / "runs.db"


def resolve_db_path(db_path: str | Path | None = None) -> Path:
    """
    Pick the run-store file: explicit path, then $RAABBVI_DB_PATH, then data/runs.db.

    Args:
        db_path (str | Path | None): Path given on the command line.

    Returns:
        Path: Database file location.
    """
    chosen = db_path or os.getenv(DB_PATH_ENV)
    return Path(chosen).expanduser() if chosen else DEFAULT_DB_PATH


def database_url(db_path: str | Path | None = None) -> str:
    """
    SQLAlchemy URL of the run store.

    Args:
        db_path (str | Path | None): Optional explicit database file.

    Returns:
        str: pysqlite URL.
    """
    return f"sqlite+pysqlite:///{resolve_db_path(db_path)}"


def get_engine(db_path: str | Path | None = None) -> Engine:
    """
    Engine on the run-store file, creating its directory on first use.

    Args:
        db_path (str | Path | None): Optional explicit database file.

    Returns:
        Engine: SQLAlchemy engine.
    """
    path = resolve_db_path(db_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return create_engine(database_url(path), future=True)


@contextmanager
def run_store_session(db_path: str | Path | None = None) -> Iterator[Session]:
    """
    Open a session on the run store with the schema in place.

    Args:
        db_path (str | Path | None): Optional explicit database file.

    Yields:
        Session: Session whose objects stay readable after commit.
    """
    engine = get_engine(db_path)
    Base.metadata.create_all(engine)
    logger.debug("Run store at %s", engine.url.database)
    try:
        with Session(engine, expire_on_commit=False) as session:
            yield session
    finally:
        engine.dispose()
