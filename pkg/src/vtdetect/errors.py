"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when a configuration value violates its documented constraints."""


class ShapeMismatchError(ValueError):
    """Raised when an input's shape is incompatible with an operation."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class DatasetError(ValueError):
    """Raised when a dataset on disk is malformed or inconsistent."""


class UndefinedAPError(ValueError):
    """Raised when average precision is requested but no positive pixels exist."""
