"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, corpus or grammar; maps to CLI exit code 1."""


class CheckpointError(RuntimeError):
    """A checkpoint directory could not be loaded as requested."""


class TrainingAborted(RuntimeError):
    """Raised when a loss turns non-finite; the last good state is kept."""
