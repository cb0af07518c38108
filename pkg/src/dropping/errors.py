"""Exception types shared across the package."""


class DroppingError(Exception):
    pass


class ShapeError(DroppingError, ValueError):
    pass


class NumericError(DroppingError, ArithmeticError):
    pass


class ConfigurationError(DroppingError, ValueError):
    pass


class InputError(DroppingError, ValueError):
    pass


class StateError(DroppingError, RuntimeError):
    pass


class RankError(DroppingError, ValueError):
    """Raised when a least-squares system is singular and cannot be solved."""
