"""Exception hierarchy. The CLI maps these onto exit codes."""


class FAEError(Exception):
    """Base class for all package errors."""


class ConfigError(FAEError, ValueError):
    """Invalid or inconsistent configuration."""


class UsageError(FAEError, ValueError):
    """An operation was called outside its domain (bad argument, empty input)."""


class ShapeError(FAEError, ValueError):
    """Tensor/grid dimensions do not compose."""


class NumericError(FAEError, ArithmeticError):
    """Non-finite values, singular systems or badly conditioned inputs."""


class RegularizationError(NumericError):
    """Unregularized fit requested on a rank-deficient design."""


class SingularityError(NumericError):
    """Quantity undefined at the requested point (e.g. the score at t=0)."""


class MatchingError(FAEError, RuntimeError):
    """Patch matching could not select a usable foreground set."""


class TrainingError(FAEError, RuntimeError):
    """Training diverged. ``last_good`` holds the most recent healthy checkpoint."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class SamplerError(NumericError):
    """The sampler state became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(FAEError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
