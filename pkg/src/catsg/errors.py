"""Exception hierarchy; CLI exit codes hang off these classes."""


class CatsgError(Exception):
    exit_code = 1


class ConfigError(CatsgError, ValueError):
    exit_code = 2


class DataError(CatsgError, ValueError):
    exit_code = 3


class NumericalError(CatsgError, ArithmeticError):
    exit_code = 4


class IntegrationDiverged(NumericalError):
    pass
