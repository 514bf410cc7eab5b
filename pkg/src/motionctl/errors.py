"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class MotionCtlError(Exception):
    exit_code = 1


class ConfigError(MotionCtlError, ValueError):
    exit_code = 2


class InputError(MotionCtlError, ValueError):
    exit_code = 2


class InvalidShapeError(MotionCtlError, ValueError):
    exit_code = 2


class ContractError(MotionCtlError, ValueError):
    exit_code = 2


class StorageError(MotionCtlError, OSError):
    exit_code = 3


class NumericError(MotionCtlError, ArithmeticError):
    exit_code = 4


class FormatError(MotionCtlError, ValueError):
    exit_code = 5
