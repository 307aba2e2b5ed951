"""
Error types for the continual distillation laboratory
Every failure raised by the package derives from CDLError
"""


class CDLError(Exception):
    """Base class for all laboratory errors"""


class ContractViolation(CDLError):
    """An operation was called with inputs that break its preconditions"""


class TapeError(CDLError):
    """A loss was differentiated against the wrong (or no) tape"""


class NumericError(CDLError):
    """NaN or infinite values reached a numeric operation"""


class DegenerateInputError(CDLError):
    """Input has no usable direction (zero norm vector)"""


class DeterminismError(CDLError):
    """A supposedly deterministic computation returned different values"""


class ConfigurationError(CDLError):
    """Components were configured inconsistently"""


class ConfigParseError(ConfigurationError):
    """An experiment config document could not be parsed"""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class RehearsalError(CDLError):
    """Training touched a sample outside the current task"""


class UndefinedMetricError(CDLError):
    """A metric is not defined for the given result matrix"""


class FormatError(CDLError):
    """A binary weights/dataset file is malformed"""


class EmptyReportError(CDLError):
    """A report was requested with no completed runs"""


class MissingInputError(CDLError):
    """A command needs files that an earlier command produces"""
