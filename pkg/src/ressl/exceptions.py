"""Exception types raised across the package."""


class ResslError(Exception):
    """Base class for all package errors."""


class ConfigError(ResslError, ValueError):
    """Invalid configuration or incompatible arguments."""


class IngestError(ResslError):
    """A dataset archive is missing, unreadable or has unexpected content."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = None if path is None else str(path)


class ChecksumError(IngestError):
    """A file does not match its recorded checksum."""


class NumericError(ResslError, ArithmeticError):
    """Non-finite or degenerate numbers where finite ones are required."""
