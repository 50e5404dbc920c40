"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad user input: shapes, schemas, configuration values."""


class ShapeError(ValidationError):
    pass


class TrainingDivergenceError(RuntimeError):
    """Raised when a non-finite value shows up in gradients or the loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class UndefinedMetricError(ValueError):
    """A statistic cannot be computed for the given data (no comparable pairs, no events)."""
