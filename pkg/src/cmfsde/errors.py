"""Exception hierarchy. Each class maps to one CLI exit code."""


class CmfError(Exception):
    exit_code = 1


class InvalidInputError(CmfError, ValueError):
    exit_code = 2


class ConfigError(InvalidInputError):
    exit_code = 2


class CapacityError(InvalidInputError):
    exit_code = 2


class DerivativeMismatchError(CmfError):
    exit_code = 2

    def __init__(self, field, mismatch):
        super().__init__(f"declared derivative {field!r} disagrees with finite differences "
                         f"(relative mismatch {mismatch:.3e})")
        self.field = field
        self.mismatch = mismatch


class NumericalBlowupError(CmfError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, location=None):
        if location is not None:
            m, i, k = location
            message = f"{message} at scenario={m}, particle={i}, step={k}"
        super().__init__(message)
        self.location = location


class DegeneracyError(NumericalBlowupError):
    pass


class StaleLawError(CmfError):
    exit_code = 4


class ValidationFailure(CmfError):
    exit_code = 5

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics or {}
