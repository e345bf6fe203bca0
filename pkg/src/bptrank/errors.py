"""Exception hierarchy shared by every stage of the pipeline."""


class BptRankError(Exception):
    """Base class for all package errors."""


class DimensionError(BptRankError, ValueError):
    """Shapes or dtypes of operands do not agree."""


class NonFiniteError(BptRankError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(BptRankError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateVectorError(ContractError):
    """A zero-norm vector was passed where a direction is required."""


class DegenerateRowError(ContractError):
    """An attention row has every key masked out."""


class RangeError(ContractError, IndexError):
    """A position or index falls outside a precomputed table."""


class LengthError(ContractError):
    """A token sequence is empty or cannot fit the model context."""


class DeterminismError(BptRankError):
    """Two evaluations of a supposedly pure function disagreed."""


class FormatError(BptRankError, ValueError):
    """A serialized payload is truncated, corrupt or of the wrong version."""


class EncodingError(BptRankError, UnicodeError):
    """Input bytes are not valid UTF-8."""

    def __init__(self, message, offset):
        super().__init__(message)
        self.offset = offset


class IngestionError(BptRankError, ValueError):
    """Corpus input is empty or inconsistent (duplicate ids, blank text)."""


class ParseError(BptRankError, ValueError):
    """A line of a line-oriented file could not be parsed."""

    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SchemaError(ParseError):
    """A parsed record violates the record schema."""

    def __init__(self, message, line_number, key=None):
        super().__init__(message, line_number)
        self.key = key


class LookupFailure(BptRankError, KeyError):
    """A required entry (embedding, qrels row, candidates) is missing."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UndefinedMetricError(BptRankError, ValueError):
    """A ranking metric is undefined for the given judgments."""


class MeasurementError(BptRankError, RuntimeError):
    """A benchmark could not produce meaningful timings."""


class TrainingDivergedError(BptRankError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, message, step, batch_ids):
        super().__init__(f"{message} (step={step}, batch={list(batch_ids)})")
        self.step = step
        self.batch_ids = list(batch_ids)


class ConfigError(BptRankError, ValueError):
    """A configuration document is invalid; ``key`` names the offending path."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class EmbeddingFailure(BptRankError, RuntimeError):
    """The embedder raised while encoding the text of ``chunk_id``."""

    def __init__(self, message, chunk_id=None):
        super().__init__(message)
        self.chunk_id = chunk_id


class ValidationError(ContractError):
    """Evaluation inputs are inconsistent; the message names the query."""
