"""Exception taxonomy. Exit codes are consumed by the CLI dispatcher."""


class BrainMAEError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(BrainMAEError):
    """Invalid configuration: bad values, unknown keys, indivisible shapes."""

    exit_code = 2


class DataError(BrainMAEError):
    """Invalid data: malformed files, non-finite voxels, bad inputs."""

    exit_code = 3


class FormatError(DataError):
    """Volume file has a bad magic number or header."""


class TruncationError(DataError):
    """Volume file payload does not match its declared shape."""


class ProtocolError(BrainMAEError):
    """An evaluation protocol precondition is not met."""

    exit_code = 4


class PairingError(BrainMAEError):
    """Cross-modal pooling requested on a sample without both token groups."""


class UndefinedLossError(BrainMAEError):
    """Loss requested on a sample with nothing to reconstruct."""


class UndefinedMetricError(BrainMAEError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class TrainingDivergedError(BrainMAEError):
    """Non-finite loss encountered; a diagnostic snapshot was written."""
