"""Exception hierarchy shared by all modules."""


class PslaError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PslaError):
    """Mismatched shapes, channel counts, or invalid configuration values."""


class UnsupportedError(PslaError):
    """A parameter combination the library deliberately does not implement."""


class InvalidInputError(PslaError):
    """Input values violate an operation's precondition."""


class UsageError(PslaError):
    """API misuse, e.g. backward without a recorded forward."""


class TrainingError(PslaError):
    """Training diverged. Carries the step index at which it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IOFormatError(PslaError):
    """Malformed tensor file or checkpoint."""
