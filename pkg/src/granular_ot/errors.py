"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class GranularOTError(Exception):
    exit_code = 1


class InputError(GranularOTError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = 2


class ConfigError(GranularOTError, ValueError):
    exit_code = 2


class DataError(GranularOTError):
    exit_code = 3


class FormatError(DataError):
    """A binary container could not be parsed.

    ``offset`` is the byte position where parsing stopped, or None when the
    problem is not tied to a position (e.g. a missing file).
    """

    def __init__(self, message, offset=None):
        self.detail = message
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(GranularOTError, ArithmeticError):
    """A numerical routine produced non-finite values."""

    exit_code = 4
