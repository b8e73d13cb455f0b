"""Exception types raised across the package."""


class ReworkPolicyError(Exception):
    """Base class for all package errors."""


class SchemaError(ReworkPolicyError):
    """A required column is missing from an input table."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing column: {column!r}")


class DataValidationError(ReworkPolicyError):
    """Input values violate a dataset invariant.

    ``row`` is the zero-based data row index, or ``None`` when the problem
    is not tied to a single row.
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DegenerateDataError(ReworkPolicyError):
    """Data carries no usable variation (e.g. zero variance)."""


class ShapeError(ReworkPolicyError, ValueError):
    """Array dimensions do not match what a fitted object expects."""


class StratificationError(ReworkPolicyError):
    """A treatment arm is too small for the requested fold count."""


class ConfigurationError(ReworkPolicyError, ValueError):
    """Invalid configuration value."""


class FitError(ReworkPolicyError):
    """A learner could not be fitted on the supplied target."""


class CrossfitError(ReworkPolicyError):
    """Cross-fitting could not produce out-of-fold predictions."""


class InsufficientDataError(ReworkPolicyError):
    """Too few observations for the requested estimate."""


class EstimandUndefinedError(ReworkPolicyError):
    """The estimand is undefined on the supplied data (e.g. empty group)."""

    def __init__(self, message, share=None):
        self.share = share
        super().__init__(message)


class SingularityError(ReworkPolicyError):
    """A design matrix is rank deficient.

    ``columns`` lists the column indices implicated in the deficiency.
    """

    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        super().__init__(message)


class UnstableQuantileWarning(UserWarning):
    """Too few bootstrap draws for a reliable quantile."""
