"""Exception taxonomy shared across the engine.

Every error class carries a stable ``exit_code`` so the CLI can translate
failures at the process boundary without inspecting messages.
"""


class CagError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ValidationError(CagError):
    """Input data violates a documented invariant."""


class ParseError(CagError):
    """A corpus or QA file line could not be parsed."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class MalformedSequenceError(CagError):
    """Token sequence contains ids that cannot be decoded to bytes."""


class InvalidMarkError(CagError):
    """Cache mark outside the valid truncation range."""


class CapacityError(CagError):
    """The context window cannot hold the requested tokens."""

    exit_code = 2

    def __init__(self, message: str, required: int | None = None,
                 available: int | None = None, partial=None):
        super().__init__(message)
        self.required = required
        self.available = available
        # partial output produced before overflow, when raised mid-generation
        self.partial = partial


class IncompatibilityError(CagError):
    """Cache, checkpoint, or index built for a different model configuration."""

    exit_code = 3


class TrainingDivergedError(CagError):
    """Loss or gradients became non-finite during training."""

    exit_code = 4


class FormatError(CagError):
    """File does not look like the expected format (bad magic or version)."""

    exit_code = 5


class CorruptionError(CagError):
    """File checksum mismatch or truncated payload."""

    exit_code = 5
