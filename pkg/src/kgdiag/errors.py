"""Exception hierarchy shared across the pipeline."""


class KgdiagError(Exception):
    """Base class for all library errors."""


class ConfigError(KgdiagError):
    """Invalid or inconsistent configuration."""


class FetchError(KgdiagError):
    """Knowledge-base fetch failed after bounded retries."""


class NotFoundError(KgdiagError):
    """Search returned no results for the query."""


class ParseError(KgdiagError):
    """A completion response had no parseable result blocks."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


class BackendError(KgdiagError):
    """Extraction backend (e.g. completion endpoint) failed."""


class NormalizationError(KgdiagError):
    """Concept-candidate provider failed; distinct from a null result."""


class BuildError(KgdiagError):
    """Graph assembly rejected its inputs."""


class CodingError(KgdiagError):
    """A label code could not be parsed under the selected scheme."""


class FormatError(KgdiagError):
    """A persisted artifact is malformed."""


class EmptyDocError(KgdiagError):
    """Preprocessing removed every token of the document."""


class EncoderError(KgdiagError):
    """A pluggable text encoder failed."""


class DivergenceError(KgdiagError):
    """Training loss became non-finite."""

    def __init__(self, message: str, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state
