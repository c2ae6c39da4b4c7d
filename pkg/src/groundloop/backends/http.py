"""OpenAI-compatible chat-completions client with base64 PNG image parts."""

from __future__ import annotations

import base64
import logging
import os
import random
import time
from typing import Callable, Optional

import httpx

from groundloop.backends.base import (
    BackendTimeout,
    ChatRequest,
    ProtocolError,
    SamplingParams,
    TransportError,
    Turn,
)

logger = logging.getLogger(__name__)

CHAT_PATH = "/v1/chat/completions"
TOKEN_ENV = "GROUNDLOOP_API_TOKEN"
_DATA_URL_PREFIX = "data:image/png;base64,"
_RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


def encode_request(request: ChatRequest, model: str, send_tags: bool = False) -> dict:
    messages = []
    for turn in request.turns:
        content = [{"type": "text", "text": turn.text}]
        for img in turn.images:
            content.append({
                "type": "image_url",
                "image_url": {"url": _DATA_URL_PREFIX + base64.b64encode(img).decode("ascii")},
            })
        messages.append({"role": turn.role, "content": content})
    if request.assistant_prefix:
        messages.append({"role": "assistant", "content": [{"type": "text", "text": request.assistant_prefix}]})
    body = {
        "model": model,
        "n": request.n,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "max_tokens": request.max_new_tokens,
        "messages": messages,
    }
    if send_tags and request.tags:
        body["metadata"] = dict(request.tags)
    return body


def decode_request(body: dict) -> ChatRequest:
    """Inverse of :func:`encode_request`; a trailing assistant message is read
    back as the assistant prefix."""
    try:
        messages = list(body["messages"])
        turns = []
        prefix = None
        for k, msg in enumerate(messages):
            content = msg["content"]
            if isinstance(content, str):
                content = [{"type": "text", "text": content}]
            texts, images = [], []
            for part in content:
                if part["type"] == "text":
                    texts.append(part["text"])
                elif part["type"] == "image_url":
                    url = part["image_url"]["url"]
                    if not url.startswith(_DATA_URL_PREFIX):
                        raise ProtocolError("only inline PNG data URLs are supported")
                    images.append(base64.b64decode(url[len(_DATA_URL_PREFIX):]))
                else:
                    raise ProtocolError(f"unknown content part type {part['type']!r}")
            text = "".join(texts)
            if msg["role"] == "assistant" and k == len(messages) - 1 and not images:
                prefix = text
            else:
                turns.append(Turn(msg["role"], text, tuple(images)))
        return ChatRequest(
            turns=tuple(turns),
            n=int(body.get("n", 1)),
            temperature=float(body.get("temperature", 1.0)),
            top_p=float(body.get("top_p", 1.0)),
            max_new_tokens=int(body.get("max_tokens", 1024)),
            assistant_prefix=prefix,
            tags={str(k): str(v) for k, v in (body.get("metadata") or {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed chat request: {exc}") from exc


def encode_response(texts: list[str], model: str = "scripted") -> dict:
    return {
        "object": "chat.completion",
        "model": model,
        "choices": [
            {"index": i, "message": {"role": "assistant", "content": t}, "finish_reason": "stop"}
            for i, t in enumerate(texts)
        ],
    }


def decode_response(body: dict) -> list[str]:
    try:
        choices = body["choices"]
        if any("index" in c for c in choices):
            choices = sorted(choices, key=lambda c: c.get("index", 0))
        out = []
        for c in choices:
            content = c["message"]["content"]
            if isinstance(content, list):
                content = "".join(p.get("text", "") for p in content)
            if not isinstance(content, str):
                raise TypeError("message content is not text")
            out.append(content)
        return out
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed chat response: {exc}") from exc


class HTTPBackend:
    """Chat client for an OpenAI-compatible endpoint.

    ``endpoint`` is the server root (``/v1/chat/completions`` is appended
    unless already present). The bearer token comes from ``token`` or the
    ``GROUNDLOOP_API_TOKEN`` environment variable.
    """

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        sampling: SamplingParams = SamplingParams(),
        system_prompt: Optional[str] = None,
        token: Optional[str] = None,
        timeout: float = 120.0,
        max_retries: int = 5,
        backoff: float = 0.5,
        send_tags: bool = False,
        sleep: Callable[[float], None] = time.sleep,
        client: Optional[httpx.Client] = None,
    ):
        endpoint = endpoint.rstrip("/")
        self.url = endpoint if endpoint.endswith(CHAT_PATH) else endpoint + CHAT_PATH
        self.model = model
        self.sampling = sampling
        self.system_prompt = system_prompt
        self.max_retries = max_retries
        self.backoff = backoff
        self.send_tags = send_tags
        self._sleep = sleep
        token = token if token is not None else os.environ.get(TOKEN_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        if client is not None and token:
            self._client.headers.update(headers)

    def close(self) -> None:
        self._client.close()

    def _delay(self, attempt: int) -> float:
        base = self.backoff * (2 ** attempt)
        return base + random.uniform(0, base)

    def chat(self, request: ChatRequest) -> list[str]:
        body = encode_request(request, self.model, self.send_tags)
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self._delay(attempt - 1))
            try:
                resp = self._client.post(self.url, json=body)
            except httpx.TimeoutException as exc:
                last_exc = BackendTimeout(f"request to {self.url} timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last_exc = TransportError(f"request to {self.url} failed: {exc}")
                continue
            if resp.status_code in _RETRY_STATUS:
                last_exc = TransportError(f"{self.url} returned {resp.status_code}", resp.status_code)
                logger.debug("retrying after status %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if not 200 <= resp.status_code < 300:
                raise TransportError(f"{self.url} returned {resp.status_code}: {resp.text[:200]}",
                                     resp.status_code)
            try:
                payload = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"response from {self.url} is not JSON") from exc
            texts = decode_response(payload)
            if len(texts) != request.n:
                raise ProtocolError(f"asked for {request.n} choices, got {len(texts)}")
            return texts
        assert last_exc is not None
        raise last_exc
