"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError exits 2,
NumericalError exits 3.
"""


class ChurnkitError(Exception):
    """Base class for all churnkit-specific errors."""


class DataError(ChurnkitError):
    """Malformed, missing, or inconsistent input data."""


class NumericalError(ChurnkitError):
    """Numerical failure: divergence, overflow, non-finite values."""


class CheckpointVersionError(DataError):
    """Checkpoint format_version is not supported."""


class CheckpointShapeError(DataError):
    """Checkpoint parameter shapes disagree with the declared config."""


class CorruptCheckpointError(DataError):
    """Checkpoint file cannot be parsed at all."""
