"""Exception hierarchy. The CLI maps each class to an exit code."""


class ZslError(Exception):
    exit_code = 1


class ConfigError(ZslError, ValueError):
    exit_code = 2


class DataError(ZslError, ValueError):
    exit_code = 3


class NumericalError(ZslError, ArithmeticError):
    exit_code = 4
