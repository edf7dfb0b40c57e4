"""Exception types shared across the workbench."""


class MedcodError(Exception):
    """Base class for all workbench errors."""


class IngestError(MedcodError):
    """Unreadable input, malformed record, or an empty ingestion run."""


class SchemaError(MedcodError):
    """A serialized record failed validation."""


class AlignmentError(MedcodError):
    """An article side segmented to zero sentences."""


class TransportError(MedcodError):
    """Endpoint unreachable, rate limited, or failing after the retry budget."""


class AuthError(MedcodError):
    """Credential rejected by the endpoint; never retried."""


class EmptyCompletionError(MedcodError):
    """The endpoint answered with an empty completion."""


class MalformedKbOutput(MedcodError):
    """KB response could not be parsed even after the repair reprompt."""


class ScorerError(MedcodError):
    """Base class for external-scorer failures."""


class ScorerCrash(ScorerError):
    """The scorer subprocess died; carries exit status and stderr tail."""


class ScorerProtocolError(ScorerError):
    """The scorer broke the wire protocol."""


class CapabilityError(ScorerError):
    """The scorer does not advertise the requested capability."""


class SpecError(MedcodError):
    """An experiment spec failed validation."""
