"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class NemesisError(Exception):
    exit_code = 1


class ParameterError(NemesisError, ValueError):
    exit_code = 2


class ConfigError(NemesisError, ValueError):
    exit_code = 2


class GeometryError(NemesisError, ValueError):
    exit_code = 2


class SpecError(NemesisError, ValueError):
    exit_code = 2


class DimensionError(NemesisError, ValueError):
    exit_code = 2


class FormatError(NemesisError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AssemblyError(NemesisError):
    exit_code = 3


class NumericError(NemesisError, ArithmeticError):
    exit_code = 4
