"""Exception types shared across the package."""


class DeepfeatError(Exception):
    """Base class for all package errors."""


class DataError(DeepfeatError):
    """Invalid or malformed input data: images, maps, datasets, containers."""


class ModelError(DeepfeatError):
    """Model checkpoint or inference problems, including feature-cache misses
    when no model is available to fill them."""
