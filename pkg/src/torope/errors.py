"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class TORoPEError(Exception):
    exit_code = 1


class ConfigError(TORoPEError, ValueError):
    exit_code = 2


class InputError(TORoPEError, ValueError):
    """Malformed arguments handed to a pure function (shapes, NaNs, lengths)."""

    exit_code = 3


class DataError(TORoPEError):
    exit_code = 3


class NumericError(TORoPEError, FloatingPointError):
    exit_code = 4
