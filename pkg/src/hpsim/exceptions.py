"""Exception types raised across the package."""


class HPSimError(Exception):
    """Base class for all package errors."""


class DimensionError(HPSimError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class PrecisionError(HPSimError, TypeError):
    """Operands carry different floating point precisions."""


class ConfigurationError(HPSimError, ValueError):
    """A model, cluster or run configuration is invalid."""


class DomainError(HPSimError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class UsageError(HPSimError, RuntimeError):
    """An API was called out of order or with mismatched state."""
