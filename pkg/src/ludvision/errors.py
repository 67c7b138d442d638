"""Exception types shared across the package."""


class LudvisionError(Exception):
    """Base class for every error raised by this package."""


class FormatError(LudvisionError, ValueError):
    """A file does not conform to its container format."""


class RangeError(LudvisionError, ValueError):
    """Reflectance outside [0, 1] or non-finite."""


class BoundsError(LudvisionError, ValueError):
    """A rectangle or index falls outside the image."""


class DimensionError(LudvisionError, ValueError):
    """Paired rasters disagree in size."""


class ShapeError(LudvisionError, ValueError):
    """Tensor shapes are inconsistent with an operation."""


class DegenerateError(LudvisionError):
    """Too little usable geometry to estimate a transform."""


class ConfigError(LudvisionError, ValueError):
    """Invalid model or run configuration."""


class StatsError(LudvisionError):
    """Normalization statistics are missing from a model."""
