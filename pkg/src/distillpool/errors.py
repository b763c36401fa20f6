"""Exception hierarchy shared by all modules."""


class DistillPoolError(Exception):
    pass


class IngestionError(DistillPoolError):
    """A dataset file is missing, truncated or unreadable."""


class CorruptionError(DistillPoolError):
    """Dataset contents violate the expected value ranges."""


class ArchiveFormatError(DistillPoolError):
    pass


class ArchiveVersionError(ArchiveFormatError):
    pass


class SpecError(DistillPoolError):
    """Invalid architecture descriptor."""


class ConfigError(DistillPoolError):
    pass


class NonFiniteError(DistillPoolError):
    """Raised when a loss or gradient stops being finite during distillation."""

    def __init__(self, message, *, config_hash=None, episode=None, trace=None):
        super().__init__(message)
        self.config_hash = config_hash
        self.episode = episode
        self.trace = list(trace or [])


class DivergenceError(DistillPoolError):
    """Every evaluation repetition diverged."""
