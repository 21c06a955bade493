"""Exception hierarchy shared across the engine."""


class SemQueryError(Exception):
    """Base class for all engine errors."""


class SchemaError(SemQueryError):
    """Table schema violation: unknown/duplicate columns, bad kinds, ragged rows."""


class LangexSyntaxError(SemQueryError):
    """Malformed template source (unbalanced braces, empty placeholder, bad side tag)."""


class LangexValidationError(SemQueryError):
    """Template references columns or sides not permitted by the target schema/mode."""


class NullCellError(SemQueryError):
    """A template rendered against a null cell; carries the offending row id."""

    def __init__(self, message: str, row_id: int | None = None):
        super().__init__(message)
        self.row_id = row_id


class IndexPersistenceError(SemQueryError):
    """Missing/corrupt index directory, or manifest inconsistent with the table."""


class BudgetError(SemQueryError):
    """An approximate operator cannot run within the configured call budget."""


class BackendError(SemQueryError):
    """LM backend transport failure after retries were exhausted."""


class PipelineValidationError(SemQueryError):
    """Pre-flight pipeline validation failure; names the offending op index."""

    def __init__(self, message: str, op_index: int | None = None):
        super().__init__(message)
        self.op_index = op_index
