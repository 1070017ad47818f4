"""Exception types shared across the package.

Each class carries the process exit code used by the command-line front end.
"""


class OdaaError(Exception):
    exit_code = 1


class InputError(OdaaError, ValueError):
    """Malformed or inconsistent user input (bad CSV, dimension mismatch, ...)."""

    exit_code = 2


class InfeasibleError(OdaaError, ValueError):
    """A constraint set or moment target admits no solution."""

    exit_code = 3


class NumericalError(OdaaError, ArithmeticError):
    """A computation produced a non-finite or out-of-range value."""

    exit_code = 4
