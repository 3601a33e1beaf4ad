"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI reports for it.
"""


class SopeError(Exception):
    exit_code = 1


class ConfigError(SopeError, ValueError):
    exit_code = 3


class UsageError(SopeError, RuntimeError):
    exit_code = 4


class NumericError(SopeError, ArithmeticError):
    exit_code = 5


class FormatError(SopeError, ValueError):
    exit_code = 6

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DependencyError(SopeError, FileNotFoundError):
    exit_code = 7
