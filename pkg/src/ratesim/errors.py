"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, ModelError -> 4.
"""


class RatesimError(Exception):
    """Base class for all package errors."""


class ConfigError(RatesimError):
    """Invalid configuration (bad paths, malformed config document, bad flags)."""


class DataError(RatesimError):
    """Invalid measurement data (parse failures, invariant violations)."""


class ModelError(RatesimError):
    """Model misuse or fit failure (schema mismatch, singular systems, missing bindings)."""


class TraceParseError(DataError):
    """Trace file rejected; carries the 1-based line number of the offending row."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ZeroVarianceError(DataError):
    """A statistic is undefined because the inputs have no variance."""
