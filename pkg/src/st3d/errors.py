"""Exception types raised across the engine."""


class ShapeError(ValueError):
    """An input's shape is incompatible with an operation.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message if axis is None else f"{message} (axis: {axis})")
        self.axis = axis


class ConfigError(ValueError):
    """An operation or model was configured with inconsistent settings."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested over an empty channel."""


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite."""


class DataError(ValueError):
    """A manifest, frame or mean file could not be read or is malformed."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the target network."""
