from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence


class BackendError(RuntimeError):
    """Base class for model-call failures."""


class TransportError(BackendError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class BackendTimeout(BackendError):
    pass


class ProtocolError(BackendError):
    """The response body did not have the expected shape."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.9
    top_p: float = 0.8
    max_new_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    images: tuple[bytes, ...] = ()  # PNG-encoded

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "images", tuple(self.images))


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call.

    ``tags`` carry routing hints (scene and region ids) that only simulated
    backends read; they go on the wire as ``metadata`` when the client is
    asked to send them.
    """

    turns: tuple[Turn, ...]
    n: int = 5
    temperature: float = 0.9
    top_p: float = 0.8
    max_new_tokens: int = 1024
    assistant_prefix: Optional[str] = None
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "tags", dict(self.tags))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        SamplingParams(self.temperature, self.top_p, self.max_new_tokens)

    @classmethod
    def build(cls, turns: Sequence[Turn], sampling: SamplingParams, n: int,
              assistant_prefix: Optional[str] = None, tags: Optional[Mapping[str, str]] = None,
              system_prompt: Optional[str] = None) -> "ChatRequest":
        turns = tuple(turns)
        if system_prompt:
            turns = (Turn("system", system_prompt),) + turns
        return cls(turns, n, sampling.temperature, sampling.top_p, sampling.max_new_tokens,
                   assistant_prefix, tags or {})

    def fingerprint(self) -> str:
        """Stable digest of everything that defines the request."""
        body = {
            "turns": [
                [t.role, t.text, [hashlib.sha256(img).hexdigest() for img in t.images]]
                for t in self.turns
            ],
            "n": self.n,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "assistant_prefix": self.assistant_prefix,
            "tags": sorted(self.tags.items()),
        }
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def last_user_text(self) -> str:
        for t in reversed(self.turns):
            if t.role == "user":
                return t.text
        return ""


class Backend(Protocol):
    sampling: SamplingParams
    system_prompt: Optional[str]

    def chat(self, request: ChatRequest) -> list[str]:
        ...


class CannedBackend:
    """Returns fixed completions, cycling through ``responses`` one per sample."""

    def __init__(self, responses: Sequence[str], sampling: SamplingParams = SamplingParams()):
        if not responses:
            raise ValueError("need at least one canned response")
        self.responses = list(responses)
        self.sampling = sampling
        self.system_prompt = None
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()
        self._pos = 0

    def chat(self, request: ChatRequest) -> list[str]:
        with self._lock:
            self.requests.append(request)
            out = []
            for _ in range(request.n):
                out.append(self.responses[self._pos % len(self.responses)])
                self._pos += 1
            return out


class CountingBackend:
    """Counts calls and samples passing through to ``inner``."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.calls = 0
        self.samples = 0
        self._lock = threading.Lock()

    @property
    def sampling(self) -> SamplingParams:
        return self.inner.sampling

    @property
    def system_prompt(self) -> Optional[str]:
        return self.inner.system_prompt

    def chat(self, request: ChatRequest) -> list[str]:
        out = self.inner.chat(request)
        with self._lock:
            self.calls += 1
            self.samples += len(out)
        return out
