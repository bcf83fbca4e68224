"""Exception types raised across the package."""


class AecError(Exception):
    """Base class for all package errors."""


class InvalidConfig(AecError, ValueError):
    pass


class ConfigError(AecError, ValueError):
    pass


class EmptyInput(AecError, ValueError):
    pass


class ShapeError(AecError, ValueError):
    pass


class DegenerateInput(AecError, ValueError):
    pass


class NumericalError(AecError, ArithmeticError):
    """Raised on non-finite values. ``name`` identifies the offending tensor when known."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name
