"""Exception hierarchy shared across the package."""


class GFormulaError(Exception):
    """Base class for all package errors."""


class ValidationError(GFormulaError, ValueError):
    """Bad input: schema, config, regime or dataset inconsistency."""


class EstimationError(GFormulaError, ArithmeticError):
    """Numerical failure while fitting or pooling."""


class ModelFitError(EstimationError):
    """A conditional model could not be fitted (rank deficiency, separation, too few rows)."""


class NegativeVarianceError(EstimationError):
    """Synthetic variance stayed non-positive after the maximum number of extension batches."""
