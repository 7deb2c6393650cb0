"""Length-prefixed message protocol used by the node agent, scheduler and harness.

Every frame is a 4-byte big-endian body length followed by a UTF-8 JSON
object with sorted keys.  A request carries a ``service`` field; the reply
carries ``ok`` and, on failure, ``error`` (an error code) and ``message``.
One request/response pair per connection.  See PROTOCOL.md.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any, Callable

from .errors import NavhopError, ProtocolError, from_wire

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_MESSAGE_SIZE = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

Message = dict[str, Any]
Handler = Callable[[Message], "Message | None"]


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def encode_frame(msg: Message) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message too large: {len(body)} bytes")
    return HEADER.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    """Up to ``n`` bytes; shorter only if the peer closed first."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Message | None:
    """Read one message; None on a clean EOF before the header."""
    head = _recv_exact(sock, HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise ProtocolError("connection closed mid-header")
    (length,) = HEADER.unpack(head)
    if length > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message too large: {length} bytes")
    body = _recv_exact(sock, length)
    if len(body) < length:
        raise ProtocolError("connection closed mid-message")
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message body: {exc}") from None
    if not isinstance(msg, dict):
        raise ProtocolError("message body must be a JSON object")
    return msg


def send_frame(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_frame(msg))


def ok(**fields: Any) -> Message:
    return {"ok": True, **fields}


def error_reply(exc: BaseException) -> Message:
    code = exc.code if isinstance(exc, NavhopError) else "InternalError"
    return {"ok": False, "error": code, "message": str(exc)}


def call(
    addr: tuple[str, int],
    request: Message,
    timeout: float = DEFAULT_TIMEOUT,
    unreachable: type[NavhopError] = ProtocolError,
) -> Message:
    """Send ``request`` and return the reply; remote errors are re-raised locally.

    Connection failures, and a peer that dies before replying, raise
    ``unreachable``.
    """
    try:
        with socket.create_connection(addr, timeout=timeout) as sock:
            send_frame(sock, request)
            reply = read_frame(sock)
    except (OSError, ProtocolError) as exc:
        raise unreachable(f"{format_addr(addr)}: {exc}") from exc
    if reply is None:
        raise unreachable(f"{format_addr(addr)} closed the connection without replying")
    if not reply.get("ok"):
        raise from_wire(str(reply.get("error", "Error")), str(reply.get("message", "")))
    return reply


class _RequestHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock: socket.socket = self.request
        try:
            request = read_frame(sock)
        except (OSError, ProtocolError) as exc:
            log.debug("bad request from %s: %s", self.client_address, exc)
            return
        if request is None:
            return
        try:
            reply = self.server.dispatch(request)
        except Exception as exc:  # replies carry the failure; the server stays up
            if not isinstance(exc, NavhopError):
                log.exception("handler crashed on %s", request.get("service"))
            reply = error_reply(exc)
        if reply is None:
            return
        try:
            send_frame(sock, reply)
        except OSError:
            pass


class Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], dispatch: Handler):
        self.dispatch = dispatch
        super().__init__(addr, _RequestHandler)
        self._thread: threading.Thread | None = None

    @property
    def addr(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def start(self) -> "Server":
        self._thread = threading.Thread(target=self.serve_forever, args=(0.05,), name=f"server-{self.addr[1]}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
