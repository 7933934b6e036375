from typing import Optional


class AdaScanError(Exception):
    """Base class for all library errors."""


class ContractViolation(AdaScanError, ValueError):
    """Shape mismatch, empty sequence, bad label or invalid configuration."""


class NumericError(AdaScanError, ArithmeticError):
    """NaN/Inf where a finite value is required."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        if sample_id is not None:
            message = f"{message} (sample {sample_id})"
        super().__init__(message)
        self.sample_id = sample_id


class IngestionError(ContractViolation):
    """A feature file could not be parsed; names the offending line."""

    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason
