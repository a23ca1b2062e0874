"""Exception types shared across modules."""


class ConfigurationError(ValueError):
    """A config file, profile, or wiring requirement is not satisfied."""


class IntegrityError(ValueError):
    """Stored artifacts disagree with each other or with their own log."""
