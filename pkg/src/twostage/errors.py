"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class TwoStageError(Exception):
    """Base class for all package errors."""

    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class NotSymmetric(TwoStageError):
    code = "not_symmetric"


class NotPSD(TwoStageError):
    code = "not_psd"


class SingularHessian(TwoStageError):
    code = "singular_hessian"


class EmptySample(TwoStageError):
    code = "empty_sample"


class SizeMismatch(TwoStageError):
    code = "size_mismatch"


class RankDeficient(TwoStageError):
    code = "rank_deficient"

    def __init__(self, message: str, null_dim: int = 0):
        super().__init__(message)
        self.null_dim = null_dim


class NonConvergence(TwoStageError):
    code = "non_convergence"

    def __init__(self, message: str, grad_norm: float = float("nan")):
        super().__init__(message)
        self.grad_norm = grad_norm


class BoundaryOptimum(TwoStageError):
    code = "boundary_optimum"


class DomainError(TwoStageError):
    code = "domain_error"


class ConstraintExhausted(TwoStageError):
    code = "constraint_exhausted"


class NonInvertible(TwoStageError):
    code = "non_invertible"


class OutOfRange(TwoStageError):
    code = "out_of_range"


class LevelMismatch(TwoStageError):
    code = "level_mismatch"


class SchemaError(TwoStageError):
    code = "schema_error"

    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.column = column

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(line=self.line, column=self.column)
        return d


class ReplicationBudgetExceeded(TwoStageError):
    code = "replication_budget_exceeded"


class ConfigError(TwoStageError):
    code = "config_error"


class WeakInstrumentWarning(UserWarning):
    """Projected design is nearly singular."""


class ClampWarning(UserWarning):
    """Inputs were clamped into the supported domain."""
