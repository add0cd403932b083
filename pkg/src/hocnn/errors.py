"""Exception hierarchy shared by every module.

The three top-level families map one-to-one onto CLI exit codes
(configuration 2, data 3, numeric 4).
"""


class HocnnError(Exception):
    exit_code = 1


class ConfigurationError(HocnnError, ValueError):
    """Shapes, windows or settings that cannot work together."""

    exit_code = 2


class ContractViolation(ConfigurationError):
    """A caller broke a documented precondition."""


class DataError(HocnnError, ValueError):
    """Malformed or inconsistent input data (files, counts, responses)."""

    exit_code = 3


class FormatError(DataError):
    """Unrecognised magic bytes or malformed header."""


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NumericError(HocnnError, ArithmeticError):
    """Non-finite values or overflow during computation."""

    exit_code = 4


class NumericOverflowError(NumericError, OverflowError):
    pass


class PointAtInfinityError(NumericError):
    pass


class UndefinedResultError(NumericError):
    """A statistic is undefined for the given input (zero spikes, zero variance)."""


class TrainingAborted(NumericError):
    """Training hit a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint=None, log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log
