"""Local HTTP server speaking the chat-completions wire format, backed by any
in-process backend (normally :class:`ScriptedBackend`)."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from groundloop.backends.base import Backend, ProtocolError
from groundloop.backends.http import CHAT_PATH, decode_request, encode_response

logger = logging.getLogger(__name__)


class _Handler(BaseHTTPRequestHandler):
    server_version = "groundloop-mock/1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging instead of stderr
        logger.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._send(404, {"error": {"message": f"no route {self.path}"}})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        if self.path.split("?", 1)[0] != CHAT_PATH:
            self._send(404, {"error": {"message": f"no route {self.path}"}})
            return
        try:
            request = decode_request(json.loads(raw))
        except (ValueError, ProtocolError) as exc:
            self._send(400, {"error": {"message": str(exc)}})
            return
        try:
            texts = self.server.backend.chat(request)
        except Exception as exc:
            logger.exception("backend failed")
            self._send(500, {"error": {"message": f"{type(exc).__name__}: {exc}"}})
            return
        self.server.request_count += 1
        self._send(200, encode_response(texts))


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, backend: Backend):
        super().__init__(address, _Handler)
        self.backend = backend
        self.request_count = 0


class MockServer:
    """Running server handle; use as a context manager or call :meth:`stop`."""

    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        self._server = _Server((host, port), backend)
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def request_count(self) -> int:
        return self._server.request_count

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockServer":
        # mock_server() hands back an already running server
        return self if self._thread is not None else self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def mock_server(backend: Backend, bind_address: str = "127.0.0.1:0") -> MockServer:
    """Start serving ``backend`` on ``host:port`` (port 0 picks a free one).
    Raises OSError if the address cannot be bound."""
    host, _, port = bind_address.rpartition(":")
    return MockServer(backend, host or "127.0.0.1", int(port or 0)).start()
