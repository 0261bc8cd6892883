"""Exception hierarchy shared across the package."""


class ProsodyIntentError(Exception):
    """Base class for all package errors."""


class DimensionError(ProsodyIntentError, ValueError):
    pass


class DegenerateMaskError(ProsodyIntentError, ValueError):
    """Raised when a masked reduction has no valid entries in some row."""


class InvalidProbabilityError(ProsodyIntentError, ValueError):
    pass


class RankError(ProsodyIntentError, ValueError):
    pass


class TooShortError(ProsodyIntentError, ValueError):
    pass


class AlignmentRangeError(ProsodyIntentError, ValueError):
    pass


class ConfigurationError(ProsodyIntentError, ValueError):
    pass


class InvalidTokenError(ProsodyIntentError, ValueError):
    pass


class FormatError(ProsodyIntentError, ValueError):
    """Unreadable or malformed input file."""


class CapacityError(ProsodyIntentError, ValueError):
    pass


class SplitError(ProsodyIntentError, ValueError):
    pass


class ParseError(ProsodyIntentError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CheckpointError(ProsodyIntentError, ValueError):
    pass


class DivergenceError(ProsodyIntentError, RuntimeError):
    pass


class SearchError(ProsodyIntentError, RuntimeError):
    pass


class LeakageError(ProsodyIntentError, ValueError):
    pass


class ProtocolError(ProsodyIntentError, ValueError):
    pass


class TransportError(ProsodyIntentError, RuntimeError):
    pass
