"""Exception types shared across the package.

Every error raised by the public API is a subclass of PreviewGateError so
callers can catch one base type at process boundaries (CLI, gateway).
"""


class PreviewGateError(Exception):
    """Base class for all package errors."""


# --- compression schedule / feature grids ---

class AllocationMismatch(PreviewGateError):
    """Tier counts do not sum to the history length."""


class IndivisibleGrid(PreviewGateError):
    """Grid dimensions are not divisible by the required stride factor."""


class WeightShapeMismatch(PreviewGateError):
    """Loaded or supplied weights do not match the expected shapes."""


# --- action codec ---

class Overflow(PreviewGateError):
    """A quantized coefficient falls outside the integer alphabet."""


class LengthMismatch(PreviewGateError):
    """A flattened sequence has the wrong number of elements."""


class AlphabetTooLarge(PreviewGateError):
    """BPE base alphabet does not fit within the target vocabulary."""


class MalformedTokens(PreviewGateError):
    """A token sequence cannot be decoded by the model that produced it."""


# --- visual codec ---

class IndivisibleImage(PreviewGateError):
    """Image dimensions are not a multiple of the patch size."""


class IndexOutOfRange(PreviewGateError):
    """A code index lies outside the codebook."""


class InsufficientData(PreviewGateError):
    """Not enough samples to fit the requested model."""


# --- unified stream ---

class VocabTooSmall(PreviewGateError):
    """Base vocabulary cannot host the remapped code bands."""


class OutOfRange(PreviewGateError):
    """A code or id lies outside its vocabulary band."""


class StreamParseError(PreviewGateError):
    """Base for parse failures; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DelimiterMismatch(StreamParseError):
    pass


class BadGroupLength(StreamParseError):
    pass


class IdOutOfBand(StreamParseError):
    pass


class TruncatedStream(StreamParseError):
    pass


class ExtraTokens(StreamParseError):
    pass


# --- dataset pipeline ---

class SchemaError(PreviewGateError):
    """An episode record violates the on-disk schema."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingFrameFile(PreviewGateError):
    """A referenced frame image does not exist on disk."""


# --- simulator / generator / gate ---

class UnknownView(PreviewGateError):
    """Requested camera view is not defined."""


class GenerationFailed(PreviewGateError):
    """A generator could not produce a proposal."""


class BlobNotFound(PreviewGateError):
    """The verifier could not locate a required marker in a preview."""


class SessionClosed(PreviewGateError):
    """The operator connection went away mid-session."""


class DecisionTimeout(PreviewGateError):
    """No operator decision arrived within the configured window."""


class BindError(PreviewGateError):
    """The service port is already in use."""
