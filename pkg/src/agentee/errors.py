"""Exception hierarchy shared across the framework."""


class AgenteeError(Exception):
    """Base class for all framework errors."""


# realm host
class RealmError(AgenteeError):
    pass


class SpawnError(RealmError):
    pass


class RegionAllocationError(RealmError):
    pass


class DeadRealmError(RealmError):
    pass


class ReadyTimeout(RealmError):
    pass


class RealmCrashed(RealmError):
    pass


class InvalidTransition(RealmError):
    pass


# attestation
class AttestationError(AgenteeError):
    pass


class BadNonceLength(AttestationError):
    pass


class BadSignature(AttestationError):
    pass


class MeasurementMismatch(AttestationError):
    pass


class NonceMismatch(AttestationError):
    pass


class ProvisioningError(AgenteeError):
    pass


class RoleAssetMismatch(ProvisioningError):
    pass


class SessionNotVerified(ProvisioningError):
    pass


class AckDigestMismatch(ProvisioningError):
    pass


# transport
class TransportError(AgenteeError):
    pass


class LayoutOverflow(TransportError):
    pass


class HeaderVersionMismatch(TransportError):
    pass


class PeerClosed(TransportError):
    pass


class OversizedMessage(TransportError):
    pass


class CorruptFrame(TransportError):
    pass


class EndpointError(TransportError):
    """Requested an endpoint the caller's side does not own."""


class WireFormatError(AgenteeError):
    pass


# secure session
class SessionError(AgenteeError):
    pass


class PeerTokenInvalid(SessionError):
    pass


class KeyConfirmFailed(SessionError):
    pass


class HandshakeTimeout(SessionError):
    pass


class AuthFailed(SessionError):
    pass


class ReplayOrReorder(SessionError):
    pass


class SessionAbsent(SessionError):
    pass


# agent / tools / inference
class AgentError(AgenteeError):
    pass


class NotProvisioned(AgentError):
    pass


class ValidationError(AgentError):
    pass


class ModelChannelDown(AgentError):
    pass


class InferenceError(AgentError):
    """The model realm answered a request with an error record."""

    def __init__(self, code: str, message: str, request_id: int | None = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
        self.request_id = request_id


class ToolError(AgentError):
    code = "tool-error"


class UnknownTool(ToolError):
    code = "unknown-tool"


class ToolDenied(ToolError):
    code = "tool-denied"


class BadArguments(ToolError):
    code = "bad-arguments"


class ToolChannelDown(ToolError):
    code = "tool-channel-down"


class EngineUnreachable(AgenteeError):
    pass


class EngineError(AgenteeError):
    pass


# bench
class BenchError(AgenteeError):
    pass


class InsufficientConfigs(BenchError):
    pass


class BenchInvariantError(BenchError):
    pass


class PipelineNotReady(AgenteeError):
    pass


class RegionUnmappable(AgenteeError):
    pass
