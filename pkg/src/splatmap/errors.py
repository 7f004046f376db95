"""Exception hierarchy shared by all splatmap modules."""


class SplatError(Exception):
    """Base class for every error raised by splatmap."""


class ConfigurationError(SplatError, ValueError):
    """Invalid configuration value, shape mismatch, or unusable request."""


class ConsistencyError(SplatError, RuntimeError):
    """Internal state does not match what an operation expects."""


class BudgetExhausted(SplatError, RuntimeError):
    """A keyframe was asked to train past its iteration budget."""


class SequenceError(SplatError, IOError):
    """A sequence directory is missing files or holds malformed records."""
