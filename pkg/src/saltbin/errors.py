"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SaltbinError(Exception):
    exit_code = 2


class ConfigError(SaltbinError, ValueError):
    exit_code = 1


class DataError(SaltbinError, ValueError):
    exit_code = 2


class ShapeError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class IntegrityError(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SaltbinError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, location=None, trace=None):
        if location is not None:
            message = f"{message} [{location}]"
        super().__init__(message)
        self.location = location
        self.trace = trace if trace is not None else []
