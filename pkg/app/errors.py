from __future__ import annotations

from typing import Optional


class TldmError(ValueError):
    """Base class for errors raised by the controller library."""


class ParameterError(TldmError):
    """Physical or algorithm parameter outside its admissible range."""


class InputError(TldmError):
    """Malformed input data: NaN/Inf values, length mismatches, bad requests."""


class StabilityError(TldmError):
    """Explicit-Euler CO2 update would overshoot the supply concentration."""

    def __init__(self, zone: int, message: Optional[str] = None) -> None:
        self.zone = zone
        super().__init__(message or f"Euler stability guard violated in zone {zone}.")


class InfeasibleError(TldmError):
    """A (sub)problem has an empty feasible set."""

    def __init__(
        self,
        message: str,
        agent: Optional[str] = None,
        constraint: Optional[str] = None,
    ) -> None:
        self.agent = agent
        self.constraint = constraint
        super().__init__(message)


class OracleBoundError(TldmError):
    """Brute-force enumeration request exceeds the combinatorial guard."""


class EpochError(TldmError):
    """An MPC epoch could not produce a plan."""
