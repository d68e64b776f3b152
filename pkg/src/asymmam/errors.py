"""Exception types shared across the package.

ConfigError maps to CLI exit code 2, every other AsymmamError to exit code 3.
"""


class AsymmamError(Exception):
    """Base class for all package errors."""


class ConfigError(AsymmamError):
    """Invalid configuration value, unknown key, or violated parameter range."""


class DataError(AsymmamError):
    """Malformed or inconsistent input data (manifests, labels, arrays)."""


class DegenerateImageError(DataError):
    """Image has no foreground/background contrast (constant or empty)."""


class ShapeError(AsymmamError):
    """Array or feature-map shape does not match the configured geometry."""


class PlacementError(AsymmamError):
    """No valid lesion insertion position could be found."""


class EmptyTumorSetError(DataError):
    """Synthesis requested but the tumor set is empty."""


class UndefinedMetricError(AsymmamError):
    """Metric undefined for the given input (single-class AUC, empty reference)."""


class TrainingAbort(AsymmamError):
    """Training stopped because a loss component became non-finite."""
