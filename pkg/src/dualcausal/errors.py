"""Exception types shared across the package."""


class DCIError(Exception):
    """Base class for all errors raised by dualcausal."""


class DimensionError(DCIError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(DCIError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(DCIError, RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigError(DCIError, ValueError):
    """An invalid configuration value or key."""


class VersionError(DCIError, ValueError):
    """A checkpoint or dataset is incompatible with the current model."""


class DivergenceError(DCIError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last state whose loss was finite.
    """

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
