"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its preconditions."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or fails shape validation."""


class ConfigError(ValueError):
    """A run configuration is missing fields or carries invalid values."""


class CapabilityError(RuntimeError):
    """A computation requires a capability (e.g. second-order jets) that the
    given object does not provide."""
