"""Event log sinks.

Every runtime-visible step (stage start/end, checkpoint upload and
promotion, hop handoff, store write points) is emitted as a flat dict.  The
harness reconstructs attempt counts and checks invariants from this log.

``SocketSink`` is synchronous: ``emit`` returns only after the harness has
acknowledged the event, which lets the harness kill a process at an exact
instrumented point without timing races.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import socket
import threading
import time
from typing import Any, Callable

from . import wire

log = logging.getLogger(__name__)

Event = dict[str, Any]

# The runtime tags every event emitted from inside a task run with that run's id.
run_context = threading.local()


def current_run() -> str | None:
    return getattr(run_context, "run", None)


class EventSink:
    def __init__(self, node: str = ""):
        self.node = node
        self.pid = os.getpid()
        self._seq = itertools.count(1)
        self._lock = threading.Lock()

    def emit(self, kind: str, **fields: Any) -> Event:
        with self._lock:
            event = {
                "kind": kind,
                "node": self.node,
                "pid": self.pid,
                "pseq": next(self._seq),
                "ts": time.time(),
                **fields,
            }
            run = current_run()
            if run is not None:
                event.setdefault("run", run)
            self._deliver(event)
        return event

    def _deliver(self, event: Event) -> None:
        pass

    def close(self) -> None:
        pass


NullSink = EventSink


class ListSink(EventSink):
    """Keeps events in memory; ``on_event`` runs inside ``emit`` (tests use it to inject faults)."""

    def __init__(self, node: str = "", on_event: Callable[[Event], None] | None = None,
                 events: list[Event] | None = None):
        super().__init__(node)
        self.events: list[Event] = events if events is not None else []
        self.on_event = on_event

    def _deliver(self, event: Event) -> None:
        self.events.append(event)
        if self.on_event is not None:
            self.on_event(event)

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e["kind"] == kind]


class FileSink(EventSink):
    """Appends one JSON line per event with a single O_APPEND write."""

    def __init__(self, path: str | os.PathLike, node: str = ""):
        super().__init__(node)
        self.fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def _deliver(self, event: Event) -> None:
        os.write(self.fd, (json.dumps(event, sort_keys=True) + "\n").encode("utf-8"))

    def close(self) -> None:
        os.close(self.fd)


class SocketSink(EventSink):
    """Streams events to the harness over one persistent connection, waiting for each ack."""

    def __init__(self, addr: tuple[str, int], node: str = ""):
        super().__init__(node)
        self.addr = addr
        self.sock: socket.socket | None = socket.create_connection(addr)

    def _deliver(self, event: Event) -> None:
        if self.sock is None:
            return
        try:
            wire.send_frame(self.sock, event)
            if wire.read_frame(self.sock) is None:
                raise ConnectionError("harness closed the event channel")
        except (OSError, wire.ProtocolError) as exc:
            log.warning("event channel lost (%s); continuing without it", exc)
            self.sock.close()
            self.sock = None

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
            self.sock = None


def read_jsonl(path: str | os.PathLike) -> list[Event]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
