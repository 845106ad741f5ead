"""Heterogeneous information crossing on session graphs for next-item recommendation."""

__version__ = "0.1.0"


class HICGError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(HICGError, ValueError):
    """Invalid configuration or argument outside its declared range."""

    exit_code = 2


class DataError(HICGError):
    """Malformed or unusable input data."""

    exit_code = 3


class NumericError(HICGError, FloatingPointError):
    """Non-finite values encountered during optimisation."""

    exit_code = 4
