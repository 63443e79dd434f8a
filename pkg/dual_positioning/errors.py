from __future__ import annotations

from dataclasses import dataclass
from typing import Any


@dataclass(frozen=True)
class Location:
    source: str = ""
    line: int | None = None
    field: str = ""

    def describe(self) -> str:
        """Render `source:line [field]`, skipping the parts that are unknown."""
        parts: list[str] = []
        if self.source:
            parts.append(self.source if self.line is None else f"{self.source}:{self.line}")
        elif self.line is not None:
            parts.append(f"line {self.line}")
        if self.field:
            parts.append(f"[{self.field}]")
        return " ".join(parts)


class ValidationError(ValueError):
    """Invalid input. Carries a stable diagnostic `code` and an optional location."""

    def __init__(self, message: str, *, code: str = "INVALID_VALUE", location: Location | None = None) -> None:
        self.code = code
        self.location = location
        self.message = message
        prefix = location.describe() if location is not None else ""
        super().__init__(f"{prefix}: {message} ({code})" if prefix else f"{message} ({code})")


class ScenarioError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class EpochFormatError(ValidationError):
    pass


class DegenerateGeometryError(ValidationError):
    pass


class UndefinedLosError(ValidationError):
    pass


class InvalidPolynomialError(ValidationError):
    pass


class NotPositiveDefiniteError(ValidationError):
    pass


class DegenerateEliminationError(ArithmeticError):
    """Neither quadratic carries a y² term, so y cannot be eliminated."""


class SolverError(RuntimeError):
    pass


class NoSolutionError(RuntimeError):
    def __init__(self, message: str, *, rejected: list[Any] | None = None, reason: str = "no_admissible_roots") -> None:
        """Raised by `cdl_solve` when no candidate survives root filtering.

        Inputs:
            message: Human-readable summary.
            rejected: `RejectedRoot` records explaining every discarded root.
            reason: Stable reason code.
        """
        self.rejected = list(rejected or [])
        self.reason = reason
        super().__init__(message)
