"""Exception types raised across the package."""


class LaneGeoError(Exception):
    """Base class for all package errors."""


class DimensionError(LaneGeoError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(LaneGeoError, ArithmeticError):
    """A NaN or infinity was produced."""


class BatchSizeError(LaneGeoError, ValueError):
    """Batch normalization in training mode needs at least two rows."""


class OptimizerError(LaneGeoError, RuntimeError):
    """A parameter handed to the optimizer has no gradient."""


class ConfigError(LaneGeoError, ValueError):
    """Invalid run configuration or model configuration."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyLaneError(LaneGeoError, ValueError):
    """A lane has no points; the caller should skip completion for it."""


class SpecError(LaneGeoError, ValueError):
    """A synthetic scene description is invalid."""


class CheckpointError(LaneGeoError, IOError):
    """A checkpoint file is malformed or missing."""
