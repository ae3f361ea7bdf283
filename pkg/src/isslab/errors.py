class ConfigError(ValueError):
    """Invalid configuration: shapes, specs, missing history."""


class InputError(ValueError):
    """Invalid data passed to an otherwise valid configuration."""
