"""Exception hierarchy used across the package."""


class SkeladvError(Exception):
    """Base class for every domain error raised by skeladv."""


class ContractError(SkeladvError, ValueError):
    """Inputs violate a documented precondition (shapes, labels, options)."""


class TopologyError(ContractError):
    """Malformed parent array (cycles, out-of-range indices)."""


class GeometryError(SkeladvError, ValueError):
    """A geometric quantity that must be positive is not (e.g. a zero bone)."""


class DegenerateSequenceError(ContractError):
    """Sequence too short for the requested temporal quantity."""


class ConfigError(ContractError):
    """Invalid configuration value."""


class TrainingError(SkeladvError, RuntimeError):
    """Training could not proceed or diverged."""


class DivergedError(SkeladvError, RuntimeError):
    """Optimization produced non-finite values.

    The partial trace is kept on ``self.trace`` for post-mortem inspection.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class FormatError(SkeladvError, ValueError):
    """A file could not be decoded or does not match its schema.

    Parameters
    ----------
    message : str
        Human-readable description.
    field : str, optional
        Dotted path of the offending field, when known.
    """

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ParseError(FormatError):
    """The document is not syntactically valid."""


class SchemaValidationError(FormatError):
    """The document parsed but its content is inconsistent."""
