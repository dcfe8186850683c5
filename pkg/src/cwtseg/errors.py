"""Shared exception types."""

__all__ = ["ConfigError", "CheckpointError", "EpisodeExhaustedError"]


class ConfigError(ValueError):
    """Invalid configuration or dataset specification."""


class CheckpointError(RuntimeError):
    """Malformed, corrupt, or incompatible checkpoint file."""


class EpisodeExhaustedError(RuntimeError):
    """No class in the pool has enough samples to form an episode."""
