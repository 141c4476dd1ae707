"""Error hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class RailDelayError(Exception):
    """Base class for all package errors."""


class ConfigError(RailDelayError):
    """Invalid or infeasible configuration."""


class DataError(RailDelayError):
    """Malformed, missing or inconsistent input data."""


class NumericError(RailDelayError):
    """Numerical failure (divergence, non-finite values)."""


class SimulationDeadlock(RailDelayError):
    """Cyclic waiting between trains; the day cannot be completed."""
