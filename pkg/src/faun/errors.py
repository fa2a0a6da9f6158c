"""Exception types shared across the package."""


class FaunError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FaunError, ValueError):
    """Invalid configuration, argument, or dimension mismatch."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class DataError(FaunError, ValueError):
    """Malformed or non-finite input data."""


class ParseError(DataError):
    """A data file could not be decoded."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericalError(FaunError, ArithmeticError):
    """An iterative procedure produced a non-finite value."""
