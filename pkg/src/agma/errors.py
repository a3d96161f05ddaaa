"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies.
"""


class ShapeError(ValueError):
    """Array arguments have incompatible or unexpected shapes."""


class DomainError(ValueError):
    """An argument is outside the domain an operation is defined on."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ParseError(ValueError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(ValueError):
    """Ingestion produced no usable scenes."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupt, or inconsistent with its config."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
