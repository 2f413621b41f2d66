"""Exception taxonomy shared across the package.

Every error raised on purpose derives from :class:`WeakIVError`, so callers
(and the CLI exit-code mapping) can distinguish anticipated failures from
bugs.
"""


class WeakIVError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(WeakIVError):
    """Invalid configuration: bad argument values, malformed config files."""


class DataError(WeakIVError):
    """Problems with input data: missing files/columns, unparseable cells,
    shape mismatches, non-finite values."""


class NumericalError(WeakIVError):
    """Numerical failure during estimation or inference."""


class SingularWeightingError(NumericalError):
    """The moment weighting matrix could not be factorized.

    Carries the parameter value at which the failure occurred plus basic
    conditioning diagnostics.
    """

    def __init__(self, message, beta=None, diagnostics=None):
        super().__init__(message)
        self.beta = beta
        self.diagnostics = diagnostics or {}


class ConvergenceError(NumericalError):
    """An iterative fit ran out of iterations.

    ``penalty`` records the regularization value being solved when the
    iteration budget was exhausted.
    """

    def __init__(self, message, penalty=None):
        super().__init__(message)
        self.penalty = penalty


class EstimationError(NumericalError):
    """Point estimation failed (no usable minimum, degenerate first stage)."""


class InferenceError(NumericalError):
    """Variance estimation or a test statistic is unavailable, e.g. because
    the objective curvature at the estimate is not positive."""
