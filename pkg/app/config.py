"""Flat key=value run configuration documents."""

from __future__ import annotations

import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from pydantic import ValidationError

from app.schemas import RunConfig

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


class ConfigError(ValueError):
    """Invalid configuration; `key` names the offending entry."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


def _split_pair(line: str, where: str) -> tuple[str, str]:
    """
    Split a key=value line.

    Args:
        line (str): Stripped, non-empty line.
        where (str): Location used in error messages.

    Returns:
        tuple[str, str]: Key and raw value.
    """
    if "=" not in line:
        raise ConfigError(line, f"expected key=value ({where})")
    key, value = line.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("", f"empty key ({where})")
    return key, value.strip()


def parse_pairs(text: str) -> dict[str, str]:
    """
    Parse key=value lines; '#' starts a comment, blank lines are skipped.

    Args:
        text (str): Configuration document.

    Returns:
        dict[str, str]: Raw values by key.

    Raises:
        ConfigError: On malformed or duplicate lines.
    """
    pairs: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_pair(line, f"line {number}")
        if key in pairs:
            raise ConfigError(key, f"duplicate key on line {number}")
        pairs[key] = value
    return pairs


def build_config(pairs: dict[str, str]) -> RunConfig:
    """
    Validate raw values into a RunConfig.

    Args:
        pairs (dict[str, str]): Raw values by key.

    Returns:
        RunConfig: Validated configuration.

    Raises:
        ConfigError: Naming the first unknown or invalid key.
    """
    unknown = sorted(set(pairs) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    try:
        return RunConfig.model_validate(pairs)
    except ValidationError as exc:
        error = exc.errors()[0]
        location = error.get("loc") or ("config",)
        raise ConfigError(str(location[0]), error["msg"]) from exc


def parse_config(text: str) -> RunConfig:
    """
    Parse a configuration document; missing keys take their defaults.

    Args:
        text (str): UTF-8 key=value document.

    Returns:
        RunConfig: Validated configuration.
    """
    return build_config(parse_pairs(text))


def _format_value(value: object) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def serialize_config(config: RunConfig) -> str:
    """
    Write a config back as key=value lines in field-declaration order.

    Args:
        config (RunConfig): Configuration.

    Returns:
        str: Canonical document that re-parses to an equal config.
    """
    lines = [
        f"{name}={_format_value(getattr(config, name))}" for name in RunConfig.model_fields
    ]
    return "\n".join(lines) + "\n"


def load_config(
    path: Path | str,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Read a config file and apply command-line overrides.

    Args:
        path (Path | str): Config file path.
        overrides (Iterable[str]): key=value strings replacing file values.
        seed (Optional[int]): Seed replacing the configured one.

    Returns:
        RunConfig: Validated configuration.

    Raises:
        ConfigError: On invalid content or overrides.
        OSError: When the file cannot be read.
    """
    pairs = parse_pairs(Path(path).expanduser().read_text(encoding="utf-8"))
    for override in overrides:
        key, value = _split_pair(override.strip(), "override")
        pairs[key] = value
    if seed is not None:
        pairs["seed"] = str(seed)
    return build_config(pairs)


def configure_logging(level: str = "INFO") -> None:
    """
    Configure the root logger once for command-line use.

    Args:
        level (str): Logging level name.
    """
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT)
