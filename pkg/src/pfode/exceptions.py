"""Exception types raised across the package."""


class DomainError(ValueError):
    """A time argument falls outside the schedule horizon."""


class SingularityError(ArithmeticError):
    """A quantity is unbounded at the requested time (e.g. log of a zero noise scale)."""


class InputError(ValueError):
    """Malformed or non-finite array input."""


class ConfigurationError(ValueError):
    """Invalid experiment, grid or scheme configuration."""


class DegeneracyError(ArithmeticError):
    """Exponential Runge-Kutta coefficients hit a vanishing denominator."""


class DivergenceError(FloatingPointError):
    """A state became non-finite during integration."""

    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class DegenerateSampleError(ValueError):
    """A sample has zero spread, so no bandwidth can be chosen."""


class InsufficientDataError(ValueError):
    """Too few usable points to fit a convergence order."""
