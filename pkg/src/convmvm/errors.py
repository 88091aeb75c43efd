"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class MaskError(ValueError):
    """A mask is invalid for the requested operation (ratio, resolution, support)."""


class ConfigError(ValueError):
    """A run configuration is missing, malformed, or inconsistent."""


class DataError(ValueError):
    """An input file or data directory is missing or malformed."""


class NumericsError(RuntimeError):
    """Training produced a non-finite value and must abort."""
