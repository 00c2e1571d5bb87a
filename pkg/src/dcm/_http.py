"""Minimal stdlib HTTP plumbing shared by the responder, log and exchange services."""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import parse_qs, urlsplit

logger = logging.getLogger(__name__)

# handler(query, body) -> (status, content_type, payload)
Handler = Callable[[dict[str, str], bytes], tuple[int, str, bytes]]

BINARY = "application/octet-stream"
JSON = "application/json"


class HttpError(Exception):
    def __init__(self, status: int, message: str) -> None:
        super().__init__(message)
        self.status = status


def json_response(obj, status: int = 200) -> tuple[int, str, bytes]:
    return status, JSON, json.dumps(obj, sort_keys=True).encode()


def int_param(query: dict[str, str], name: str, default: Optional[int] = None) -> int:
    if name not in query:
        if default is None:
            raise HttpError(400, f"missing query parameter {name!r}")
        return default
    try:
        return int(query[name])
    except ValueError:
        raise HttpError(400, f"query parameter {name!r} must be an integer") from None


def make_server(
    routes: dict[tuple[str, str], Handler], host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    class _Handler(BaseHTTPRequestHandler):
        def _dispatch(self, method: str) -> None:
            parts = urlsplit(self.path)
            handler = routes.get((method, parts.path))
            if handler is None:
                self._send(*json_response({"error": "not found"}, 404))
                return
            query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            try:
                result = handler(query, body)
            except HttpError as exc:
                result = json_response({"error": str(exc)}, exc.status)
            except Exception as exc:  # noqa: BLE001 - report, keep serving
                logger.exception("handler for %s %s failed", method, parts.path)
                result = json_response({"error": f"{type(exc).__name__}: {exc}"}, 400)
            self._send(*result)

        def _send(self, status: int, ctype: str, payload: bytes) -> None:
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self) -> None:  # noqa: N802
            self._dispatch("GET")

        def do_POST(self) -> None:  # noqa: N802
            self._dispatch("POST")

        def log_message(self, fmt: str, *args) -> None:
            logger.debug("%s " + fmt, self.address_string(), *args)

    return ThreadingHTTPServer((host, port), _Handler)


def serve_in_background(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread


def server_url(server: ThreadingHTTPServer) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}"


def request(url: str, data: Optional[bytes] = None, timeout: float = 5.0) -> tuple[int, bytes]:
    """GET (or POST when ``data`` is given). Network failures raise OSError."""
    req = urllib.request.Request(url, data=data, method="POST" if data is not None else "GET")
    if data is not None:
        req.add_header("Content-Type", BINARY)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()
