"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class STEDError(Exception):
    exit_code = 1


class ConfigError(STEDError, ValueError):
    """Bad configuration or architecture mismatch."""

    exit_code = 2


class DataError(STEDError, ValueError):
    """Unusable input data: malformed files, too little history, unknown zones."""

    exit_code = 3


class IngestionError(DataError):
    pass


class DimensionError(STEDError, ValueError):
    """Tensor shapes do not fit the operation."""

    exit_code = 2


class ContractError(STEDError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 2


class DivergenceError(STEDError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4
