"""Shared exception types.

Every error raised by this package derives from ClinbiasError.  The CLI maps
exception classes to exit codes (see cli.EXIT_CODES); library callers can
catch the base class.
"""


class ClinbiasError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ClinbiasError):
    """Bad user input: malformed config, file, or argument."""


class ParseError(ValidationError):
    """A source file could not be parsed (bad layout, bad field)."""


class StructuralError(ValidationError):
    """Parsed data violates a structural invariant (e.g. a code that
    falls inside no known block)."""


class CodeLookupError(ClinbiasError):
    """A diagnosis code is not present in the loaded hierarchy."""


class IngestError(ValidationError):
    """Stimulus ingestion failed (missing column, empty group, ...)."""


class TemplateError(ValidationError):
    """A prompt template is missing a required placeholder."""


class TransportError(ClinbiasError):
    """A backend call failed at the network/HTTP layer.  Retriable."""


class CapabilityError(ClinbiasError):
    """The configured backend cannot serve the request (e.g. no logprobs)."""


class IncompleteRunError(ClinbiasError):
    """A run stopped before all queries were answered; state was
    checkpointed and the same command can be re-issued to resume."""
