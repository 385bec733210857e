"""Exception types raised across the package."""


class CrShiftError(Exception):
    """Base class for domain errors (maps to CLI exit code 2)."""


class ParseError(CrShiftError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LeakageError(CrShiftError):
    """Data from the target day (or later) reached training or feature construction."""


class TrainingError(CrShiftError):
    pass


class DegenerateMetricError(CrShiftError, ValueError):
    """A metric is undefined on the given input (one-class test set, zero baseline LLHN)."""


class InsufficientDataError(CrShiftError, ValueError):
    pass


class CalibrationError(CrShiftError, ValueError):
    pass


class ConfigError(CrShiftError, ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite intermediate inside an objective evaluation (CLI exit code 3)."""
