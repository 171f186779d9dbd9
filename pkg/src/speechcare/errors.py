"""Exception hierarchy shared across the package."""


class SpeechCareError(Exception):
    """Base class for all package errors."""


class ShapeError(SpeechCareError, ValueError):
    pass


class DomainError(SpeechCareError, ValueError):
    pass


class StateError(SpeechCareError, RuntimeError):
    pass


class FormatError(SpeechCareError, ValueError):
    pass


class ArityError(SpeechCareError, ValueError):
    pass


class ValidationError(SpeechCareError, ValueError):
    pass


class ImputationError(SpeechCareError, ValueError):
    pass


class UndefinedMetricError(SpeechCareError, ValueError):
    pass


class NumericError(SpeechCareError, ArithmeticError):
    """Training diverged (NaN/inf loss)."""
