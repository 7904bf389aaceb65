"""Exception hierarchy shared across the package.

Exit-code mapping in the CLI: ConfigError/DataError -> 2,
TrainingError/MetricError/SelectionError/InternalError -> 3.
"""


class HarmonizerError(Exception):
    """Base class for all package errors."""


class ConfigError(HarmonizerError):
    """Bad configuration: dimension mismatch, missing column, invalid flag."""


class DataError(HarmonizerError):
    """Data violates a contract: missing values, degenerate column, malformed row."""


class TrainingError(HarmonizerError):
    """Training diverged or hit non-finite numbers."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class MetricError(HarmonizerError):
    """Metric undefined for the given inputs (e.g. baseline at chance level)."""


class SelectionError(HarmonizerError):
    """No harmonization iteration satisfies the selection constraints."""


class InternalError(HarmonizerError):
    """Invariant broken inside the package; a bug, not a user error."""
