"""Exception hierarchy shared across the package."""


class NVKMError(Exception):
    """Base class for all errors raised by ``nvkm``."""


class InvalidArgument(NVKMError, ValueError):
    pass


class IllConditionedGram(NVKMError, ArithmeticError):
    """Cholesky factorization failed even after jitter escalation."""


class NumericInconsistency(NVKMError, ArithmeticError):
    """An internal consistency check failed; this indicates a bug, not bad data."""


class UnsupportedOrder(NVKMError, ValueError):
    pass


class IncompatibleCheckpoint(NVKMError):
    pass


class ParseError(NVKMError, ValueError):
    """Malformed input file (checkpoint, CSV or config)."""


class EmptySeries(NVKMError, ValueError):
    pass


class UndefinedMetric(NVKMError, ArithmeticError):
    pass


class NonFiniteGradient(NVKMError, FloatingPointError):
    pass


class TrainingAborted(NVKMError, FloatingPointError):
    """Raised when the ELBO becomes non-finite.

    ``model`` holds the last parameter state with a finite objective and
    ``trace`` the steps completed so far.
    """

    def __init__(self, message, model=None, trace=None):
        super().__init__(message)
        self.model = model
        self.trace = trace
