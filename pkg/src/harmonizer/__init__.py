"""Two-group tabular data sanitization and privacy-utility evaluation."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    HarmonizerError,
    InternalError,
    MetricError,
    SelectionError,
    TrainingError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "HarmonizerError",
    "InternalError",
    "MetricError",
    "SelectionError",
    "TrainingError",
    "__version__",
]
