"""Exception hierarchy shared across the package."""


class LateError(Exception):
    """Base class for every error raised by latecomb."""

    code = "error"


class InputError(LateError, ValueError):
    code = "input"


class SingularSystemError(LateError, ArithmeticError):
    """A regularized linear system could not be solved to tolerance."""

    code = "singular"

    def __init__(self, message, lam=None, condition=None):
        super().__init__(message)
        self.lam = lam
        self.condition = condition


class DegenerateFitError(LateError):
    code = "degenerate_fit"


class DegenerateDesignError(LateError):
    """Rejection sampling of treated covariates accepts (almost) nothing."""

    code = "degenerate_design"


class ExhaustedSearchError(LateError):
    code = "exhausted_search"


class DatasetError(LateError):
    """Problem reading or validating a dataset file."""

    code = "dataset"

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingFileError(DatasetError):
    code = "missing_file"


class MalformedRowError(DatasetError):
    code = "malformed_row"


class DimensionMismatchError(DatasetError, InputError):
    code = "dimension_mismatch"


class ValidationError(DatasetError, InputError):
    code = "validation"
