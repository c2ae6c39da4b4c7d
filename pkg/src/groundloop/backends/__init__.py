from groundloop.backends.base import (
    Backend,
    BackendError,
    BackendTimeout,
    CannedBackend,
    ChatRequest,
    CountingBackend,
    ProtocolError,
    SamplingParams,
    TransportError,
    Turn,
)
from groundloop.backends.http import HTTPBackend
from groundloop.backends.scripted import ScriptedAgentProfile, ScriptedBackend
from groundloop.backends.server import MockServer, mock_server

__all__ = [
    "Backend",
    "BackendError",
    "BackendTimeout",
    "CannedBackend",
    "ChatRequest",
    "CountingBackend",
    "HTTPBackend",
    "MockServer",
    "ProtocolError",
    "SamplingParams",
    "ScriptedAgentProfile",
    "ScriptedBackend",
    "TransportError",
    "Turn",
    "mock_server",
]
