from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import InputError


logger = logging.getLogger("hvac_tldm")
epoch_logger = logging.getLogger("hvac_tldm.epochs")


def init_logging(level: str = "INFO", epoch_log: Optional[str | Path] = None) -> None:
    """Configure basic structured logging for the application."""

    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
    )
    logger.setLevel(level.upper())

    for handler in list(epoch_logger.handlers):
        epoch_logger.removeHandler(handler)
        handler.close()
    epoch_logger.propagate = False
    if epoch_log:
        path = Path(epoch_log)
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path, mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        epoch_logger.addHandler(handler)
        epoch_logger.setLevel(logging.INFO)


def log_epoch(record: Dict[str, Any]) -> None:
    """Append one JSON line to the per-epoch progress log (no-op when not configured)."""

    if epoch_logger.handlers:
        epoch_logger.info(json.dumps(record, sort_keys=True))


def ensure_path_within_workspace(path: str, base_dir: str = "runs") -> Path:
    """
    Ensure that the provided path is within the allowed workspace directory.

    The HTTP and MCP surfaces only read and write files below this directory.
    """

    base = Path(base_dir).resolve()
    target = (base / path).resolve() if not Path(path).is_absolute() else Path(path).resolve()

    if target != base and base not in target.parents:
        raise InputError(f"Path '{path}' must be within the '{base_dir}' workspace directory.")
    return target


def format_error(message: str, details: Dict[str, Any] | None = None) -> Dict[str, Any]:
    """Standard error payload used by HTTP, MCP and CLI responses."""

    payload: Dict[str, Any] = {"success": False, "message": message}
    if details:
        payload["details"] = details
    return payload
