"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config errors exit 1,
data errors exit 2, numeric errors exit 3.
"""


class MatError(Exception):
    """Base class for all package errors."""


class UsageError(MatError):
    """API or command-line misuse (bad arguments, non-scalar loss, ...)."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration values."""


class DimensionError(MatError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(MatError):
    """An operation produced (or received) NaN/Inf values."""


class MaskingError(MatError):
    """An attention mask leaves a query row with no attendable position."""


class DataError(MatError):
    """Malformed, missing, or insufficient input data."""


class TrainingError(MatError):
    """Training diverged; carries the epoch/batch where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(MatError):
    """Base class for checkpoint load failures."""


class CheckpointHeaderError(CheckpointError):
    """Checkpoint header is missing, corrupt, or has the wrong version."""


class CheckpointTruncationError(CheckpointError):
    """Checkpoint payload is shorter (or longer) than its directory claims."""


class CheckpointCensusError(CheckpointError):
    """Checkpoint tensor directory disagrees with the config's census."""
