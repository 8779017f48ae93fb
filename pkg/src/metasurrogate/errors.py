"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class SurrogateError(Exception):
    exit_code = 1


class UsageError(SurrogateError, ValueError):
    exit_code = 2


class DataError(SurrogateError, ValueError):
    exit_code = 3


class NumericError(SurrogateError, ArithmeticError):
    exit_code = 4
