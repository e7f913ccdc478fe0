"""Error types shared across the pipeline, mapped to CLI exit codes."""


class StereoError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigurationError(StereoError):
    """Bad layer shapes, invalid hyperparameters, unusable configuration."""

    exit_code = 2


class InputError(StereoError):
    """Bad or missing data: empty datasets, mismatched maps, unreadable files."""

    exit_code = 3


class StateError(StereoError):
    """Operation invoked in an invalid state (e.g. backward before forward)."""

    exit_code = 3


class NumericError(StereoError):
    """Numeric guard tripped (values outside a required open interval, etc.)."""

    exit_code = 4
