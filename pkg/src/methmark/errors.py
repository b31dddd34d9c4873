"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, data errors -> 3,
numerical failures -> 4.
"""


class MethmarkError(Exception):
    """Base class for all package errors."""


class ConfigError(MethmarkError):
    """Invalid run configuration (bad paths, malformed JSON, bad values)."""


class ParseError(MethmarkError):
    """Malformed input file. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(MethmarkError):
    """Input values violate a declared invariant (e.g. beta outside [0,1])."""


class AlignmentError(MethmarkError):
    """Cohorts cannot be aligned (e.g. tumour sample without clinical data)."""


class ImputationError(MethmarkError):
    """Imputation impossible (e.g. a probe with no observed values)."""


class InsufficientReferenceError(MethmarkError):
    """Too few healthy samples to estimate reference moments."""


class ConvergenceError(MethmarkError):
    """An iterative solver failed to converge."""


class StageError(MethmarkError):
    """A pipeline stage failed or a required upstream stage is missing."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage
