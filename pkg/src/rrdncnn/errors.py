"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class GeometryError(ValueError):
    """Stride/padding/kernel combination yields an invalid output extent."""


class ConfigError(ValueError):
    """Invalid network, training or run configuration."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class ChecksumError(CheckpointError):
    """Checkpoint CRC-32 does not match its contents (e.g. truncated file)."""


class VideoFormatError(ValueError):
    """Raw YUV data does not match the declared geometry."""


class CodecError(RuntimeError):
    """External codec invocation failed."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss was produced during training."""
