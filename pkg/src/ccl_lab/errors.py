"""Exception types shared across the package."""


class CclError(Exception):
    """Base class for all package errors."""


class DimensionError(CclError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(CclError):
    """Numeric input outside the operation's domain (log of non-positive,
    zero-norm row, non-finite value)."""


class ContractError(CclError):
    """Caller violated an operation's contract (non-scalar loss, missing
    gradients, non-simplex target, ...)."""


class EmptyTapeError(ContractError):
    """backward() called on a tensor with no recorded computation."""


class ConfigError(CclError):
    """Invalid configuration value or combination."""


class EmptyClassError(ConfigError):
    """A class would receive zero samples."""


class FormatError(CclError):
    """Malformed container file (bad magic, version, or payload size)."""


class DegenerateFitError(CclError):
    """Mixture fit cannot separate components (e.g. all inputs identical)."""
