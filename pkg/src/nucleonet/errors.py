"""Exception hierarchy; the CLI maps each class to an exit code."""


class NucleonetError(Exception):
    exit_code = 2


class ConfigError(NucleonetError, ValueError):
    """Inconsistent model spec, bad config key or bad argument."""

    exit_code = 1


class DataError(NucleonetError, ValueError):
    """Malformed input file or a label invariant breach."""

    exit_code = 2


class NumericalError(NucleonetError, FloatingPointError):
    """NaN or Inf showed up in a loss, activation or gradient."""

    exit_code = 3
