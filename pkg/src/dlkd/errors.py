"""Exception types shared across the package.

Each class carries the CLI exit code it maps to (1 usage/config, 2 data/format,
3 numeric failure).
"""


class DLKDError(Exception):
    exit_code = 1


class UsageError(DLKDError):
    exit_code = 1


class ConfigError(DLKDError, ValueError):
    exit_code = 1


class ParameterError(DLKDError, ValueError):
    exit_code = 1


class ShapeError(DLKDError, ValueError):
    exit_code = 2


class InputError(DLKDError, ValueError):
    exit_code = 2


class ConsistencyError(DLKDError):
    exit_code = 2


class FormatError(DLKDError):
    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(DLKDError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class GradcheckError(DLKDError, ArithmeticError):
    exit_code = 3


class ExperimentError(DLKDError):
    def __init__(self, message, arm=None, seed=None, cause=None):
        super().__init__(message)
        self.arm = arm
        self.seed = seed
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
