"""Exception types shared across the package."""

from __future__ import annotations


class IvmeanError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(IvmeanError):
    """A model, formula, or run configuration is invalid."""


class DataError(IvmeanError):
    """An input dataset violates the expected schema or contract."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContractViolation(IvmeanError):
    """An operation was called on inputs that break its preconditions."""


class EvaluationDomainError(IvmeanError):
    """Base for numerical-domain failures while evaluating moment functions.

    The root solver treats these as recoverable during line search (the trial
    step is rejected and halved); anywhere else they propagate.
    """


class WeightExplosionError(EvaluationDomainError):
    """A respondent's fitted response probability fell below the floor."""

    def __init__(self, indices, floor: float):
        self.indices = tuple(int(i) for i in indices)
        self.floor = floor
        head = ", ".join(str(i) for i in self.indices[:5])
        more = "" if len(self.indices) <= 5 else f" (+{len(self.indices) - 5} more)"
        super().__init__(
            f"respondent weight explosion: fitted response probability below "
            f"{floor:g} at record index {head}{more}"
        )


class DegenerateMixtureError(EvaluationDomainError):
    """The nonrespondent mixture density has a vanishing denominator."""


class SolverEvaluationError(IvmeanError):
    """The residual function raised at an accepted iterate.

    Carries the offending iterate so callers can inspect where evaluation
    broke down.
    """

    def __init__(self, message: str, iterate):
        super().__init__(message)
        self.iterate = iterate


class EstimationError(IvmeanError):
    """An estimator could not produce a result on the given data."""
