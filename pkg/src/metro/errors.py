"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 1,
numeric failures exit 2, file/format problems exit 3.
"""


class MetroError(Exception):
    """Base class for all package errors."""


class ValidationError(MetroError, ValueError):
    """Bad input: wrong shapes, out-of-range values, inconsistent data."""


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ParseError(ValidationError):
    """Malformed text input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AlignmentError(ValidationError):
    pass


class NumericError(MetroError, ArithmeticError):
    """NaN/inf encountered where finite values are required."""


class FormatError(MetroError, OSError):
    """Binary file with a bad magic number, version or truncated payload."""
