"""Exception types shared across the package."""


class BevDriveError(Exception):
    """Base class for package-specific errors."""


class ConfigError(BevDriveError):
    """A configuration value is invalid or inconsistent."""


class ContractViolation(BevDriveError):
    """An API was called outside its contract (bad shapes, step after done, ...)."""


class TrainingError(BevDriveError):
    """Training produced a non-finite value or otherwise cannot continue."""
