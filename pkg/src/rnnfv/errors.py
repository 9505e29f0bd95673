"""Exception hierarchy. The CLI maps each class to an exit code."""


class RnnFvError(Exception):
    """Base class for toolkit errors."""


class ConfigError(RnnFvError, ValueError):
    exit_code = 2


class DataError(RnnFvError, ValueError):
    exit_code = 3


class DivergenceError(RnnFvError, ArithmeticError):
    exit_code = 4
