"""Exception hierarchy shared across the package.

The CLI maps each branch to a distinct process exit code, so new errors
should subclass the closest existing branch rather than Exception.
"""


class EpiwaveError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EpiwaveError):
    """Invalid configuration value or malformed run-config file."""


class DataValidationError(EpiwaveError):
    """Input arrays violate a documented invariant (non-binary labels, NaNs, ...)."""


class MappingError(EpiwaveError):
    """Channel/region bookkeeping is inconsistent (unknown channel, empty region)."""


class SamplingInfeasibleError(EpiwaveError):
    """An evaluation subset at the requested ratio cannot be drawn."""


class SaturationError(EpiwaveError):
    """Synthetic scenario would exceed the positive-rate ceiling."""


class UndefinedScoreError(EpiwaveError):
    """Alignment score requested with no event windows to score."""


class UndefinedMetricError(EpiwaveError):
    """Metric undefined for the given inputs (e.g. AUC with a single class)."""


class StorageError(EpiwaveError):
    """Base class for dataset/checkpoint file problems."""


class FormatVersionError(StorageError):
    """File was written by an unknown (newer) format version."""


class TruncatedFileError(StorageError):
    """File ends before the declared payload does."""


class ChecksumError(StorageError):
    """Payload bytes do not match the stored checksum."""


class TrainingDivergedError(EpiwaveError):
    """Loss became non-finite during optimization."""

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state
