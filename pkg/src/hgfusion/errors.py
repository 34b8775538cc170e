"""Exception hierarchy shared by every layer of the package."""


class HGFusionError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HGFusionError, ValueError):
    """Shapes, extents or model recipes that cannot work together."""


class UsageError(HGFusionError, ValueError):
    """A call that violates an API contract (wrong inputs for the mode)."""


class DegenerateInputError(HGFusionError, ValueError):
    pass


class ValidationError(HGFusionError, ValueError):
    """A record violates a data invariant."""


class IngestionError(HGFusionError, IOError):
    """A file could not be read or parsed."""


class FormatError(HGFusionError, IOError):
    """A binary container is corrupt, truncated or of an unknown version."""


class NumericalError(HGFusionError, ArithmeticError):
    """NaN or Inf appeared in a forward or backward pass."""
