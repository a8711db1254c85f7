# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Exception hierarchy shared by the simulator and its command line.

Every error carries the process exit code the CLI should return for it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional


class AsgradError(RuntimeError):
    """Base class for all simulator failures."""

    exit_code: int = 1


class ConfigurationError(AsgradError):
    """Invalid configuration or an invalid combination of settings."""

    exit_code = 2


class ParameterError(ConfigurationError, ValueError):
    """An argument lies outside its admissible range."""


class DimensionError(ParameterError):
    """A vector does not match the dataset dimension."""


class WorkerIndexError(ParameterError, IndexError):
    """A worker index lies outside ``[0, n)``."""


class ParseError(ConfigurationError):
    """A malformed line in an input file.

    Parameters
    ----------
    path:
        File being parsed.
    line_number:
        1-based line number of the offending line.
    reason:
        Human-readable description of the problem.
    """

    def __init__(self, path: Path | str, line_number: int, reason: str) -> None:
        self.path = Path(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{self.path}:{line_number}: {reason}")


class DivergenceError(AsgradError):
    """The iterate norm exceeded the divergence threshold.

    The partial trace collected up to the failing step is attached so the
    caller can still export it.
    """

    exit_code = 3

    def __init__(self, message: str, trace: Optional[Any] = None) -> None:
        super().__init__(message)
        self.trace = trace


class IncompleteTraceError(AsgradError):
    """A trace lacks data that a diagnostic needs."""

    exit_code = 4


class CadenceError(IncompleteTraceError):
    """A required parameter snapshot was not retained."""


class ContractViolation(AsgradError):
    """An assignment strategy broke the engine's contract."""


class InvariantError(AsgradError):
    """An internal invariant no longer holds."""
