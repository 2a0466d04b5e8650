"""Exception types shared across the package."""


class PanoDepthError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PanoDepthError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(PanoDepthError):
    """An argument violates an operation's contract (bad enum value, non-scalar loss, ...)."""


class ConfigError(PanoDepthError):
    """A configuration file or config value is invalid."""


class SampleRejectedError(PanoDepthError):
    """A sample has no valid pixels and cannot be used for loss or metrics."""


class DatasetError(PanoDepthError):
    """A dataset directory or file violates the expected layout."""


class CheckpointError(PanoDepthError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before all declared records could be read."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor shapes do not match the current model configuration."""
