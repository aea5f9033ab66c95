"""Exception hierarchy shared across the package."""


class WpkError(Exception):
    """Base class for all package errors."""


class ConfigError(WpkError):
    """Invalid configuration (bad keys, missing paths, inconsistent values)."""


class NumericError(WpkError):
    """Numerical failure during optimization or sampling."""


class CvInapplicableError(ConfigError):
    """Cross-validation requested in a setting where it cannot be run (k=1)."""
