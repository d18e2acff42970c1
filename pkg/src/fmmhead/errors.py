"""Exception hierarchy shared by every fmmhead module.

The CLI maps these onto exit codes: validation problems exit with 1,
structural and I/O problems with 2.
"""


class FMMError(Exception):
    """Base class for all fmmhead errors."""

    exit_code = 2


class ValidationError(FMMError, ValueError):
    """An input is well formed but violates a documented range or rule."""

    exit_code = 1


class StructuralError(FMMError):
    """Shapes, lengths or file layouts do not match what was expected."""

    exit_code = 2


class IngestionError(StructuralError):
    """A data file could not be parsed. Carries the offending line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{':'.join(where)}: {message}"
        super().__init__(message)


class TrainingError(FMMError):
    """Raised when an optimisation step receives non-finite gradients."""

    exit_code = 1

    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class UndefinedMeanError(FMMError, ValueError):
    """The circular mean is undefined because the resultant vector vanishes."""

    exit_code = 1
