"""Exception hierarchy shared across the package."""


class AgblabError(Exception):
    """Base class for all package errors."""


class DomainError(AgblabError, ValueError):
    """A physical quantity violated its admissible range.

    Carries the offending field name so callers can report precisely.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArgumentError(AgblabError, ValueError):
    """A structurally invalid argument (empty series, length mismatch, ...)."""


class ShapeError(AgblabError, ValueError):
    """Incompatible array shapes; message names both shapes."""


class ConfigError(AgblabError, ValueError):
    """Invalid configuration; message carries the field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class NumericError(AgblabError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss; carries the last good state."""

    def __init__(self, iteration, best_iteration, message="non-finite loss"):
        self.iteration = iteration
        self.best_iteration = best_iteration
        super().__init__(
            f"{message} at iteration {iteration} "
            f"(last good checkpoint: iteration {best_iteration})"
        )


class DataSchemaError(AgblabError, ValueError):
    """CSV/schema violation; message names line number and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        detail = message
        if column is not None:
            detail = f"column '{column}': {detail}"
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)


class CorrelationUndefined(AgblabError, ValueError):
    """Pearson correlation requested on a constant series."""


class InsufficientData(AgblabError, ValueError):
    """Too few effective observations for the requested statistic."""


class MissingArtifact(AgblabError, FileNotFoundError):
    """A required upstream artifact does not exist; message names the path."""
