"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters or configuration values."""


class DimensionError(ValueError):
    """Vectors or layouts that do not line up."""


class NumericInputError(ValueError):
    """Non-finite values where finite ones are required."""


class FormatError(ValueError):
    """Malformed on-disk data (IDX files, manifests)."""
