# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Status-line logging.

Console lines follow the ``[*] ...`` / ``[+] ...`` / ``[!] ...`` convention
used by the lab scripts, emitted through the standard :mod:`logging` tree so
library code can stay quiet unless a handler is installed.
"""

from __future__ import annotations

import logging
import sys
from typing import Any

ROOT_LOGGER = "asgrad"

_MARKERS = {
    logging.DEBUG: "[.]",
    logging.INFO: "[*]",
    logging.WARNING: "[!]",
    logging.ERROR: "[-]",
    logging.CRITICAL: "[-]",
}


class MarkerFormatter(logging.Formatter):
    """Prefix each message with the marker for its level.

    A record may override the marker through ``extra={"marker": "[+]"}``.
    """

    def format(self, record: logging.LogRecord) -> str:
        marker = getattr(record, "marker", None) or _MARKERS.get(record.levelno, "[*]")
        return f"{marker} {record.getMessage()}"


class _ConsoleHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    def __init__(self) -> None:
        logging.Handler.__init__(self)

    @property
    def stream(self):  # type: ignore[override]
        return sys.stderr


def get_logger(name: str) -> logging.Logger:
    """Return the ``asgrad.<name>`` logger."""
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def log_success(logger: logging.Logger, msg: str, *args: Any) -> None:
    logger.info(msg, *args, extra={"marker": "[+]"})


def configure_logging(verbose: bool = False) -> logging.Logger:
    """Install the console handler on the root ``asgrad`` logger.

    Calling this more than once only adjusts the level.
    """
    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, _ConsoleHandler) for h in root.handlers):
        handler = _ConsoleHandler()
        handler.setFormatter(MarkerFormatter())
        root.addHandler(handler)
    root.propagate = False
    return root
