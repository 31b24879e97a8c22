"""Exception types shared across the package.

The CLI maps each class to a fixed process exit code.
"""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""

    exit_code = 4


class ParseError(ValueError):
    """An input file could not be parsed."""

    exit_code = 2

    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column


class SolverError(RuntimeError):
    """The QP could not be set up or solved."""

    exit_code = 3


class NumericError(ArithmeticError):
    """A numerical routine failed to converge or became ill-posed."""

    exit_code = 4
