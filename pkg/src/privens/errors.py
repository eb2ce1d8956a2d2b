"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
BudgetExhaustedError -> 4.
"""


class PrivensError(Exception):
    """Base class for all package errors."""


class ConfigError(PrivensError):
    """Invalid parameter or configuration value."""


class DataError(PrivensError):
    """Malformed, inconsistent, or insufficient input data."""


class CsvParseError(DataError):
    """Malformed CSV row; carries the offending line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class CatalogError(DataError):
    """Feature id not covered by the feature catalog."""


class ShapeError(DataError):
    """Dimension mismatch between arrays that must align."""


class AlignmentError(DataError):
    """Misfit vectors do not share the same evaluation sample index."""


class InsufficientDataError(DataError):
    """A record is too short for the configured regressor."""


class EmptyPoolError(ConfigError):
    """An ensemble or candidate pool needs at least one model."""


class GrowthInvariantError(PrivensError):
    """Ensemble validation MSE increased during growing; the run is invalid."""


class SingularMatrixError(PrivensError):
    """Covariance matrix is numerically singular; use a larger ridge."""


class NegativeWeightError(PrivensError):
    """Negative weights are refused on the privacy path."""


class BudgetExhaustedError(PrivensError):
    """The privacy accountant has no budget left for this query."""


class UndefinedAurocError(DataError):
    """AUROC needs both classes present in the labels."""


class DegenerateBaselineError(ConfigError):
    """Accuracy loss needs a non-private AUROC above 0.5."""
