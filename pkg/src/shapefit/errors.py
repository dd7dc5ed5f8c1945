"""Exception hierarchy shared across the package.

Every error raised by library code derives from ShapefitError so callers
(including the CLI, which maps categories to exit codes) can distinguish
data problems, numeric failures, and I/O issues without string matching.
"""


class ShapefitError(Exception):
    """Base class for all package errors."""


class ConfigError(ShapefitError):
    """Invalid configuration value (bad fractions, non-positive sizes, ...)."""


class DataError(ShapefitError):
    """Base class for problems with input data."""


class MissingInputError(DataError):
    """A required input file does not exist."""


class SchemaError(DataError):
    """Column schema is invalid or does not match the data file."""


class NonNumericCellError(DataError):
    """A continuous column holds a value that does not parse as a number."""

    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}, column '{column}': cannot parse {value!r} as a number")
        self.row = row
        self.column = column
        self.value = value


class UnknownLevelError(DataError):
    """A categorical cell is not among the declared levels."""

    def __init__(self, row: int, column: str, value: str, levels: tuple):
        super().__init__(
            f"row {row}, column '{column}': level {value!r} not in declared levels {list(levels)}"
        )
        self.row = row
        self.column = column
        self.value = value


class MissingValueError(DataError):
    """A cell is empty where a value is required."""

    def __init__(self, row: int, column: str):
        super().__init__(f"row {row}, column '{column}': missing value")
        self.row = row
        self.column = column


class ConstantColumnError(DataError):
    """Standardization hit a column with zero standard deviation."""

    def __init__(self, column: str):
        super().__init__(f"column '{column}' has zero standard deviation")
        self.column = column


class NumericError(ShapefitError):
    """Base class for numeric failures (overflow, divergence, domain)."""


class DomainError(NumericError):
    """An argument is outside the mathematical domain of an operation."""


class NumericOverflowError(NumericError):
    """A computation produced a non-finite intermediate value."""


class HeredityError(ShapefitError):
    """A pairwise term lacks one of its parent main effects."""


class SelectionError(ShapefitError):
    """The staged selection procedure could not produce a usable result."""


class ArchiveError(ShapefitError):
    """A model archive is malformed or has an unsupported format version."""
