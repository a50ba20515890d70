"""Exception types shared across the package."""


class ConfigError(ValueError):
    """An invalid hyperparameter or option combination."""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
