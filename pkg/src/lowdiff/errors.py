"""Exception hierarchy shared by every module."""


class LowDiffError(Exception):
    """Base class for all package errors."""


class DimensionError(LowDiffError, ValueError):
    pass


class NumericError(LowDiffError, ValueError):
    pass


class StorageError(LowDiffError, OSError):
    pass


class MissingCheckpointError(StorageError):
    pass


class CorruptCheckpointError(StorageError):
    pass


class FormatError(StorageError):
    pass


class ChainGapError(LowDiffError):
    pass


class PipelineError(LowDiffError):
    pass


class ConfigError(LowDiffError, ValueError):
    pass
