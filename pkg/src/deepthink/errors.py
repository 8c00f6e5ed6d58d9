"""Exception types raised across the package."""


class DeepThinkError(Exception):
    """Base class for all package errors."""


class ShapeError(DeepThinkError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DeepThinkError, ValueError):
    """A configuration value is invalid or missing."""


class DegenerateStatsError(DeepThinkError, ValueError):
    """Batch statistics are undefined (e.g. variance of one element)."""


class ContractError(DeepThinkError, RuntimeError):
    """A call violated a documented precondition."""


class FormatError(DeepThinkError, ValueError):
    """A file does not follow the expected binary layout."""


class DivergenceError(DeepThinkError, RuntimeError):
    """Training produced a non-finite loss."""
