"""Exception types raised across the package."""


class NSKBError(Exception):
    """Base class for library errors."""


class InputError(NSKBError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(InputError):
    """Arrays disagree in their action count or dimension."""


class InvalidKernelError(NSKBError, ValueError):
    """Kernel parameters are invalid or the kernel produced non-finite values."""


class FactorizationError(NSKBError, ArithmeticError):
    """A matrix could not be factorized even after jitter escalation."""


class TrainingDivergedError(NSKBError, ArithmeticError):
    """Gradient descent produced a non-finite loss."""

    def __init__(self, message, step=None, losses=None):
        super().__init__(message)
        self.step = step
        self.losses = list(losses) if losses is not None else []


class ConfigError(NSKBError, ValueError):
    """An experiment configuration failed validation."""
