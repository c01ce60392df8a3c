"""Exception types shared across gclkit."""


class GCLError(Exception):
    """Base class for gclkit errors."""


class InvalidArgumentError(GCLError, ValueError):
    pass


class DegenerateInputError(GCLError, ValueError):
    """Raised when a geometric fit has too few or rank-deficient inputs."""


class NotEnoughMatchesError(GCLError, ValueError):
    pass


class TrainingFailedError(GCLError, RuntimeError):
    """Raised when too many training steps were skipped."""
