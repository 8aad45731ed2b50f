"""Exception types shared across the package."""


class AdvDefError(Exception):
    """Base class for all advdef-specific errors."""


class ConfigError(AdvDefError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DependencyError(AdvDefError):
    """A required pipeline phase or artifact is missing (CLI exit code 3)."""


class DatasetError(AdvDefError):
    """Dataset could not be fetched or is unusable."""
