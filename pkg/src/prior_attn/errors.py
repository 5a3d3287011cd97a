"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or axes are inconsistent with the operation's contract."""


class NumericError(ValueError):
    """Numeric domain violation (NaN input, log of non-positive, ...)."""


class ContractError(ValueError):
    """An operation precondition beyond pure shape checking was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""
