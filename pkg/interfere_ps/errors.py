"""Exception hierarchy for interfere-ps.

Every error raised by the library derives from :class:`InterferePSError`.
The three families map onto the CLI exit codes: configuration problems
exit with 2, bad data with 3 and numerical failures with 4.
"""

from typing import Any, List, Optional


class InterferePSError(Exception):
    """Base class for all library errors."""

    exit_code = 1

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details
        self.context: List[str] = []

    def add_context(self, text: str) -> "InterferePSError":
        """Prefix the message with where the error happened (e.g. ``fold 2``)."""
        self.context.insert(0, text)
        return self

    def __str__(self) -> str:
        return ": ".join(self.context + [self.message])


class ConfigError(InterferePSError):
    exit_code = 2


class DataError(InterferePSError, ValueError):
    exit_code = 3


class NumericalError(InterferePSError, ArithmeticError):
    exit_code = 4


# Configuration

class InvalidConfigError(ConfigError):
    """A settings file or simulation config has a bad or unknown key."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message if key is None else f"{key}: {message}", key=key)
        self.key = key


# Data

class DimensionMismatchError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class EmptyClusterError(DataError):
    pass


class NonBinaryTreatmentError(DataError):
    pass


class ParseError(DataError):
    """Raised when a study file cannot be read; ``line`` is 1-based."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}", line=line)
        self.line = line


class InvalidPermutationError(DataError):
    pass


class RankDeficientError(DataError):
    pass


class TooFewObservationsError(DataError):
    pass


class TooFewClustersError(DataError):
    pass


class DegenerateTrainingFoldError(DataError):
    pass


class InvalidNodeCountError(DataError):
    pass


class InvalidVarianceError(DataError):
    pass


class IndexOutOfRangeError(DataError):
    pass


class InvalidExposureLevelError(DataError):
    pass


class MissingFValueError(DataError):
    pass


class MissingOutcomeError(DataError):
    pass


class ZeroPropensityError(DataError):
    pass


class ClusterTooLargeError(DataError):
    pass


class NoisyTableError(DataError):
    pass


class StudyMismatchError(DataError):
    """A fit or truth file does not describe the study it is applied to."""


class QuadratureMismatchError(DataError):
    """The quadrature rule targets a different variance than the model."""


# Numerical

class SeparationDetectedError(NumericalError):
    pass


class NotConvergedError(NumericalError):
    """An iterative fit stopped without meeting its tolerance.

    ``fit`` carries the last iterate (with its trace) when one exists.
    """

    def __init__(self, message: str, fit: Any = None):
        super().__init__(message)
        self.fit = fit


class NonFiniteIntegrandError(NumericalError):
    pass


class MaxDepthExceededError(NumericalError):
    pass


class NonFiniteLikelihoodError(NumericalError):
    pass


class BracketFailureError(NumericalError):
    pass
