"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration values."""


class ShapeError(ValueError):
    """Tensor shape does not match the contract of an operation."""


class NumericError(ValueError):
    """Non-finite values or numerically undefined inputs."""


class ProtocolError(ValueError):
    """A required feature level or stage is missing for the requested protocol."""


class CacheError(ValueError):
    """Base class for binary container / feature cache failures."""


class ChecksumError(CacheError):
    """Payload CRC does not match, or the file is too short to validate."""


class ShapeMismatchError(CacheError):
    """Header-declared payload geometry disagrees with the actual payload."""


class MissingLevelError(CacheError):
    """A feature cache directory lacks one of the required levels."""


class VersionError(CacheError):
    """Unsupported container or checkpoint version."""


class ConfigMismatchError(CacheError):
    """Checkpoint was written under a different model configuration."""


class DataError(ValueError):
    """Base class for dataset loading failures."""


class CountMismatchError(DataError):
    """Row counts disagree with the declared dataset structure."""


class UnknownChannelError(DataError):
    """A requested channel name is absent from the montage."""


class MissingRepetitionError(DataError):
    """Repetition counts are uneven across test stimuli."""
