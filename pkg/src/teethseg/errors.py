"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 1, DataError/FormatError -> 2, NumericError -> 3.
"""


class TeethSegError(Exception):
    pass


class ConfigError(TeethSegError):
    """Invalid configuration or geometry (bad divisibility, unknown keys, ...)."""


class ContractError(TeethSegError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Shape mismatch between operands."""


class DataError(TeethSegError):
    """Bad runtime data (out-of-range labels, missing dataset, ...)."""


class FormatError(DataError):
    """Corrupt or truncated serialized file."""


class NumericError(TeethSegError):
    """NaN/Inf surfaced during compute, or a gradient check failed."""
