"""Shared exception types."""


class KvcError(Exception):
    """Base class for all engine errors."""


class ShapeError(KvcError):
    """Tensor dimensions do not line up."""


class ConfigError(KvcError):
    """Invalid model, policy, or run configuration."""


class UsageError(KvcError):
    """An operation was called outside its contract."""
