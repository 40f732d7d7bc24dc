"""Byte-stream transports for offload frames: raw TCP and HTTP/1.1 POST.

Both carry the same length-prefixed frames; HTTP just wraps each frame in a
request body at ``/v1/infer-tail``. The edge itself can be exposed over HTTP
at ``/v1/infer`` (image bytes in, JSON out).
"""
from __future__ import annotations

import http.client
import http.server
import json
import socket
import socketserver
import threading
from urllib.parse import urlsplit

import numpy as np

from .codec import TruncatedFrameError, frame_length
from .services import CloudService, EdgeService

TAIL_PATH = "/v1/infer-tail"
EDGE_PATH = "/v1/infer"
MAX_FRAME = 64 << 20


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 16))
        if not chunk:
            raise TruncatedFrameError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> bytes:
    prefix = recv_exact(sock, 4)
    n = frame_length(prefix)
    if n > MAX_FRAME:
        raise TruncatedFrameError(f"frame of {n} bytes exceeds the {MAX_FRAME} byte limit")
    return prefix + recv_exact(sock, n)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


# --- raw TCP ---------------------------------------------------------------------

class TcpTransport:
    """One connection per request; counts calls."""

    def __init__(self, address: str, timeout: float = 30.0):
        self.address = parse_address(address)
        self.timeout = timeout
        self.calls = 0

    def send(self, frame: bytes) -> bytes:
        self.calls += 1
        with socket.create_connection(self.address, timeout=self.timeout) as sock:
            sock.sendall(frame)
            return recv_frame(sock)


class _TcpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            frame = recv_frame(self.request)
        except (OSError, TruncatedFrameError):
            return
        self.request.sendall(self.server.cloud.handle_frame(frame))


class _ThreadingTCP(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpCloudServer:
    def __init__(self, cloud: CloudService, address: str = "127.0.0.1:0"):
        self._srv = _ThreadingTCP(parse_address(address), _TcpHandler)
        self._srv.cloud = cloud
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._srv.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "TcpCloudServer":
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._srv.serve_forever()

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


# --- HTTP --------------------------------------------------------------------------

class HttpTransport:
    def __init__(self, url: str, timeout: float = 30.0):
        parts = urlsplit(url if "://" in url else f"http://{url}")
        self.host, self.port = parts.hostname or "127.0.0.1", parts.port or 80
        self.path = parts.path if parts.path not in ("", "/") else TAIL_PATH
        self.timeout = timeout
        self.calls = 0

    def send(self, frame: bytes) -> bytes:
        self.calls += 1
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.request("POST", self.path, body=frame, headers={"Content-Type": "application/octet-stream"})
            resp = conn.getresponse()
            body = resp.read()
        finally:
            conn.close()
        if resp.status != 200:
            raise OSError(f"HTTP {resp.status} from {self.host}:{self.port}{self.path}")
        return body


class _QuietHandler(http.server.BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    def _body(self) -> bytes:
        n = int(self.headers.get("Content-Length", "0"))
        if n > MAX_FRAME:
            raise ValueError("request body too large")
        return self.rfile.read(n)

    def _reply(self, status: int, body: bytes, ctype: str):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class _CloudHttpHandler(_QuietHandler):
    def do_POST(self):
        if self.path != TAIL_PATH:
            self._reply(404, b"not found", "text/plain")
            return
        self._reply(200, self.server.cloud.handle_frame(self._body()), "application/octet-stream")


class _EdgeHttpHandler(_QuietHandler):
    def do_POST(self):
        if self.path != EDGE_PATH:
            self._reply(404, b"not found", "text/plain")
            return
        from ..data import decode_image
        try:
            image = decode_image(self._body())
            reply = self.server.edge.handle(image)
        except Exception as exc:  # noqa: BLE001 - turn into a 4xx/5xx for the caller
            body = json.dumps({"error": f"{type(exc).__name__}: {exc}"}).encode()
            self._reply(400 if isinstance(exc, ValueError) else 502, body, "application/json")
            return
        body = json.dumps(edge_reply_json(reply)).encode()
        self._reply(200, body, "application/json")


def edge_reply_json(reply) -> dict:
    r = reply.result
    return {"predicted_class": r.predicted_class, "confidence": r.confidence, "exit": r.exit_label,
            "exit_id": r.exit_id, "offloaded": r.offloaded, "kind": reply.kind.value,
            "latency": reply.latency.as_dict()}


class _HttpServer:
    handler: type

    def __init__(self, address: str):
        self._srv = http.server.ThreadingHTTPServer(parse_address(address), self.handler)
        self._srv.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._srv.server_address[:2]
        return f"{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._srv.serve_forever()

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


class HttpCloudServer(_HttpServer):
    handler = _CloudHttpHandler

    def __init__(self, cloud: CloudService, address: str = "127.0.0.1:0"):
        super().__init__(address)
        self._srv.cloud = cloud


class HttpEdgeServer(_HttpServer):
    handler = _EdgeHttpHandler

    def __init__(self, edge: EdgeService, address: str = "127.0.0.1:0"):
        super().__init__(address)
        self._srv.edge = edge


def post_image(address: str, image: np.ndarray) -> dict:
    """Client helper: send one image to an edge server, return its JSON reply."""
    from ..data import encode_png
    host, port = parse_address(address)
    conn = http.client.HTTPConnection(host, port, timeout=60)
    try:
        conn.request("POST", EDGE_PATH, body=encode_png(image), headers={"Content-Type": "image/png"})
        resp = conn.getresponse()
        return json.loads(resp.read())
    finally:
        conn.close()


__all__ = ["HttpCloudServer", "HttpEdgeServer", "HttpTransport", "TcpCloudServer", "TcpTransport",
           "post_image", "parse_address", "recv_frame", "edge_reply_json"]
