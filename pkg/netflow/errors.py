"""Exception hierarchy for netflow.

Library code raises these; only the command-line driver turns them into exit
codes (0 ok, 2 configuration/input error, 3 solver failure, 4 acceptance check
failure).
"""

from __future__ import annotations

from typing import Any


class NetflowError(Exception):
    """Base class for all netflow errors."""

    exit_code = 3


class ConfigError(NetflowError):
    exit_code = 2


class ParameterError(NetflowError, ValueError):
    """A numeric parameter is outside its admissible range."""

    exit_code = 2


class PreconditionError(NetflowError, ValueError):
    """An input violates the precondition of the requested operation."""

    exit_code = 2


class InsufficientDataError(NetflowError, ValueError):
    exit_code = 2


class MeshFormatError(NetflowError, ValueError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(NetflowError, ValueError):
    exit_code = 2


class SolverError(NetflowError, RuntimeError):
    """An iterative solver failed; `report` holds iteration diagnostics."""

    def __init__(self, message: str, report: dict[str, Any] | None = None):
        self.report = dict(report or {})
        super().__init__(message)


class SingularSystemError(SolverError):
    def __init__(self, message: str, component: list[int] | None = None):
        self.component = list(component or [])
        super().__init__(message, {"component": self.component})


class IndefinitePermeabilityError(SolverError):
    def __init__(self, message: str, triangle: int):
        self.triangle = triangle
        super().__init__(message, {"triangle": triangle})


class NonFiniteUpdateError(SolverError):
    def __init__(self, message: str, edge: int):
        self.edge = edge
        super().__init__(message, {"edge": edge})


class FlowError(SolverError):
    """Step-size halving was exhausted without an acceptable step."""


class AcceptanceError(NetflowError):
    exit_code = 4
