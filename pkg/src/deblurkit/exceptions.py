"""Shared exception types."""


class DimensionError(ValueError):
    """Raised when image/tensor shapes violate an operation's contract."""


class ImageIOError(OSError):
    """Raised when an image file cannot be read or written."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file is corrupt, truncated or incompatible."""


class TrainingDiverged(RuntimeError):
    """Raised by the divergence guard when a loss goes non-finite or explodes."""
