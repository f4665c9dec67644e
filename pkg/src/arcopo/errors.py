"""Exception types shared by every module.

The CLI maps these onto exit codes, so each failure class gets its own type.
"""


class ArcopoError(Exception):
    pass


class InvalidArgument(ArcopoError, ValueError):
    pass


class NumericFailure(ArcopoError, ArithmeticError):
    pass


class UnsupportedOperation(ArcopoError, TypeError):
    pass


class NotFound(ArcopoError, FileNotFoundError):
    pass
