"""Shared exception types."""


class SignposeError(Exception):
    """Base class for all package-specific errors."""


class DataError(SignposeError):
    """Malformed or inconsistent input data (files, schemas, shapes)."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{loc} {message}".strip() if loc else message)
        self.path = path
        self.line = line


class NumericError(SignposeError):
    """Non-finite values or a failed numeric check during computation."""


class UsageError(SignposeError):
    """Invalid command-line invocation."""
