"""Exception hierarchy.

Every error raised on purpose by the package derives from ``SupFTSVDError`` so
the CLI can map it onto an exit code.
"""


class SupFTSVDError(Exception):
    exit_code = 1


class ValidationError(SupFTSVDError, ValueError):
    """Bad arguments or configuration (CLI exit code 2)."""

    exit_code = 2


class DomainError(ValidationError):
    """A time point outside [0, 1] was handed to the kernel."""


class DataFormatError(SupFTSVDError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 3)."""

    exit_code = 3


class EmptyResultError(DataFormatError):
    """A filtering rule removed every feature."""


class NumericalError(SupFTSVDError, ArithmeticError):
    """A numerical failure during estimation (CLI exit code 4)."""

    exit_code = 4


class DegenerateError(NumericalError):
    """A quantity collapsed to zero where a positive value is required."""


class SingularMatrixError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class InsufficientDataError(NumericalError):
    pass


class MatchingError(NumericalError):
    pass
