"""Exception hierarchy shared by every subpackage."""


class DiffCDError(Exception):
    """Base class for all errors raised by diffcd."""


class ShapeError(DiffCDError, ValueError):
    pass


class ContractError(DiffCDError, ValueError):
    """An operation was called outside its preconditions."""


class ConfigError(DiffCDError, ValueError):
    pass


class NumericError(DiffCDError, ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""


class LoadError(DiffCDError, OSError):
    pass
