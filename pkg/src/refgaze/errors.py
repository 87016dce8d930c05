"""Exception types shared across the package.

CLI exit-code mapping: ConfigError -> 2, data errors (ParseError,
SchemaError, ValidationError) -> 3, NumericError -> 4.
"""


class RefgazeError(Exception):
    pass


class ConfigError(RefgazeError):
    """Invalid configuration value or combination."""


class ShapeError(RefgazeError):
    """Operands with incompatible shapes fed to a tensor op."""


class NumericError(RefgazeError):
    """Non-finite value where a finite one is required."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ContractError(RefgazeError):
    """Caller violated an operation precondition."""


class ParseError(RefgazeError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(RefgazeError):
    def __init__(self, field, line=None, message=""):
        detail = message or f"missing or malformed field {field!r}"
        super().__init__(f"line {line}: {detail}" if line is not None else detail)
        self.field = field
        self.line = line


class ValidationError(RefgazeError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SkipRecord(RefgazeError):
    """Record cannot participate in the requested computation."""
