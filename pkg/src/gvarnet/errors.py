"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured error reports without string matching.
"""


class GvarnetError(Exception):
    """Base class for all errors raised by this package."""

    code = "ERROR"


class InsufficientData(GvarnetError):
    """Too few rows, occasions or non-missing values for the request."""

    code = "INSUFFICIENT_DATA"


class SingularCovariance(GvarnetError):
    """Covariance matrix is singular or too ill-conditioned to invert."""

    code = "SINGULAR_COVARIANCE"


class InvalidPrecision(GvarnetError):
    """Precision matrix violates a structural requirement (e.g. diagonal)."""

    code = "INVALID_PRECISION"


class SingularDesign(GvarnetError):
    """Regression design matrix is rank deficient."""

    code = "SINGULAR_DESIGN"


class ConvergenceFailure(GvarnetError):
    """An iterative solver did not converge.

    ``last`` holds the last iterate (solver specific), ``trace`` an optional
    history of objective values, so callers can inspect what happened.
    """

    code = "CONVERGENCE_FAILURE"

    def __init__(self, message, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace


class NonStationary(GvarnetError):
    """Temporal coefficient matrix has spectral radius >= 1."""

    code = "NON_STATIONARY"


class GenerationFailure(GvarnetError):
    """Random model generation failed repeatedly (stability/PD redraws)."""

    code = "GENERATION_FAILURE"


class ParseError(GvarnetError):
    """A cell of an input file could not be parsed.

    ``row`` is the 1-based data row (header excluded), ``column`` the column
    name.
    """

    code = "PARSE_ERROR"

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DuplicateOccasion(GvarnetError):
    """Two rows share the same (subject id, time) key."""

    code = "DUPLICATE_OCCASION"


class ConfigError(GvarnetError):
    """Run configuration failed validation."""

    code = "CONFIG_INVALID"
