"""Exception hierarchy shared by the library and the command line front end."""
from typing import Any, Dict, Optional


class ElMissingError(Exception):
    """Base class for every error raised by elimpute"""

    exit_code = 3


class InputError(ElMissingError):
    """Bad input: malformed files, wrong schema or violated preconditions"""

    exit_code = 2


class ParseError(InputError):
    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"Cannot parse value {value!r} in row {row}, column {column!r}")


class SchemaError(InputError):
    pass


class DataValidationError(InputError):
    pass


class NumericalError(ElMissingError):
    """A computation could not produce a valid result"""

    exit_code = 3


class NoDonorsError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    pass


class EvaluationError(NumericalError):
    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        super().__init__(message if row is None else f"{message} (row {row})")


class DomainError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class HullError(NumericalError):
    pass


class ConditioningError(NumericalError):
    pass


class StudyAbortedError(NumericalError):
    pass
