"""Shared exception types."""


class MpxError(Exception):
    """Base class for toolkit errors."""


class ConfigError(MpxError):
    """Invalid environment variable, option value, or config file."""


class UsageError(MpxError):
    """Bad command-line invocation."""


class TransportError(MpxError):
    """A peer connection failed or closed before a matching message arrived."""


class StateError(MpxError):
    """Operation on a finalized context or other dead object."""


class LaunchError(MpxError):
    """A child process could not be started."""


class PortInUseError(MpxError):
    """A listener could not bind; the message carries the canonical phrase."""


class AttachError(MpxError):
    """A debug agent could not be reached."""


class ProtocolError(MpxError):
    """Unexpected traffic on a debug connection."""


class ScriptError(MpxError):
    """A debug script failed or timed out; carries the partial transcript."""

    def __init__(self, message: str, transcript: list[str] | None = None):
        super().__init__(message)
        self.transcript = transcript or []


class GatewayError(MpxError):
    """The HTTP gateway could not start."""


class LoadError(MpxError):
    """A profile or trace file failed to parse."""


class ReportError(MpxError):
    """Aggregation or comparison over an unusable input set."""


class MergeError(MpxError):
    """Trace merging failed."""
