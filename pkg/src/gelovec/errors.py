"""Exception types shared across the package."""


class GeloVecError(Exception):
    pass


class DimensionError(GeloVecError, ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericalError(GeloVecError, ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


class DataError(GeloVecError, ValueError):
    """Raised for malformed datasets, masks, or manifests."""


class FormatError(GeloVecError, ValueError):
    """Raised for malformed image or checkpoint files."""


class ConfigError(GeloVecError, ValueError):
    """Raised for invalid run configuration or checkpoint/config mismatches."""
