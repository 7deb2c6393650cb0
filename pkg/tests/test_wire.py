import json
import socket
import struct

import pytest

from navhop import wire
from navhop.errors import Busy, NodeUnreachable, ProtocolError, StaleSequence


def test_frame_layout():
    frame = wire.encode_frame({"service": "health", "a": 1})
    body = b'{"a":1,"service":"health"}'
    assert frame == struct.pack(">I", len(body)) + body


def test_frame_roundtrip_over_socketpair():
    a, b = socket.socketpair()
    with a, b:
        wire.send_frame(a, {"x": [1, 2], "s": "ü"})
        assert wire.read_frame(b) == {"x": [1, 2], "s": "ü"}
        a.shutdown(socket.SHUT_WR)
        assert wire.read_frame(b) is None


@pytest.mark.parametrize("raw", [
    struct.pack(">I", 3) + b"abc",
    struct.pack(">I", 4) + b"[1] ",
    struct.pack(">I", 2) + b"\xff\xfe",
    struct.pack(">I", 10) + b"{}",
    struct.pack(">I", wire.MAX_MESSAGE_SIZE + 1),
    b"\x00\x00",
])
def test_bad_frames(raw):
    a, b = socket.socketpair()
    with a, b:
        a.sendall(raw)
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(ProtocolError):
            wire.read_frame(b)


def test_call_and_remote_error():
    def dispatch(msg):
        if msg["service"] == "echo":
            return wire.ok(value=msg["value"])
        if msg["service"] == "busy":
            raise Busy("full")
        if msg["service"] == "silent":
            return None
        raise StaleSequence("late")

    srv = wire.Server(("127.0.0.1", 0), dispatch).start()
    try:
        assert wire.call(srv.addr, {"service": "echo", "value": 5})["value"] == 5
        with pytest.raises(Busy):
            wire.call(srv.addr, {"service": "busy"})
        with pytest.raises(StaleSequence):
            wire.call(srv.addr, {"service": "other"})
        with pytest.raises(NodeUnreachable):
            wire.call(srv.addr, {"service": "silent"}, unreachable=NodeUnreachable)
    finally:
        srv.stop()


def test_connection_refused_maps_to_unreachable():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    addr = s.getsockname()
    s.close()
    with pytest.raises(NodeUnreachable):
        wire.call(addr, {"service": "health"}, timeout=1.0, unreachable=NodeUnreachable)


def test_addr_parsing():
    assert wire.parse_addr("127.0.0.1:8080") == ("127.0.0.1", 8080)
    assert wire.format_addr(("h", 1)) == "h:1"
    with pytest.raises(ValueError):
        wire.parse_addr("nohost")
