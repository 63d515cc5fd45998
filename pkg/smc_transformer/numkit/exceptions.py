# numkit/exceptions.py
"""
Exception hierarchy shared by every app of the project.

Management commands turn any SmcTransformerError into a CommandError, so the
messages here are what the user reads on a failed run.
"""


class SmcTransformerError(Exception):
    """Base class for all project errors"""


class DomainError(SmcTransformerError, ValueError):
    """An operation was called outside its domain (bad shape, negative variance, ...)"""


class NumericalError(SmcTransformerError, ArithmeticError):
    """A computation produced non-finite values or underflowed"""


class UnsupportedKernelError(DomainError):
    """A taped expression used a kernel the differentiation engine does not know"""


class ConfigError(DomainError):
    """Invalid run or training configuration"""


class SchemaError(DomainError):
    """Input file does not match the documented CSV schema"""


class CsvParseError(SchemaError):
    """A cell or row of an input CSV could not be parsed"""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        location = []
        if line is not None:
            location.append(f'line {line}')
        if column is not None:
            location.append(f'column {column!r}')
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class TrainingDivergedError(NumericalError):
    """Training produced a NaN/Inf loss"""

    def __init__(self, step, series_id, value=None):
        self.step = step
        self.series_id = series_id
        self.value = value
        super().__init__(
            f'Non-finite loss {value} at optimisation step {step} (series {series_id})'
        )
