import time

import pytest

from navhop import agent as agent_mod
from navhop.colocation import default_registry
from navhop.events import ListSink
from navhop.runtime import NodeDescriptor, NodeEnv, RetryPolicy
from navhop.scheduler import LocalSchedulerClient, Registry
from navhop.store import MemoryStore


def no_sleep(_):
    pass


@pytest.fixture
def store():
    return MemoryStore()


@pytest.fixture
def registry():
    return Registry()


@pytest.fixture
def sched(registry):
    return LocalSchedulerClient(registry)


@pytest.fixture
def log():
    return []


@pytest.fixture
def make_env(store, sched, log):
    def make(node_id="A", apps=None, **kw):
        kw.setdefault("retry", RetryPolicy(sleep=no_sleep))
        return NodeEnv(
            NodeDescriptor(node_id, "127.0.0.1", 0),
            store,
            apps or default_registry(hop_other="B"),
            sched,
            events=ListSink(node_id, events=log),
            **kw,
        )

    return make


@pytest.fixture
def cluster(store, sched, registry, log):
    """Two in-process agents A and B sharing one store, scheduler and event log."""
    apps = default_registry(hop_other="B")
    exits = []
    agents, servers = {}, []
    for node_id in ("A", "B"):
        a, srv = agent_mod.launch(node_id, store, apps, sched, events=ListSink(node_id, events=log),
                                  exit_fn=exits.append, retry=RetryPolicy(sleep=no_sleep))
        agents[node_id] = a
        servers.append(srv)
    agents["exits"] = exits
    yield agents
    for srv in servers:
        srv.stop()


def wait_for(pred, timeout=10.0, interval=0.01):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(interval)
    return pred()


ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Records one PASS/FAIL line; an exception inside the block counts as FAIL."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.notes: list[str] = []

    def __enter__(self):
        return self

    def require(self, ok, note):
        self.notes.append(note)
        assert ok, note

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc_type is not None and not isinstance(exc, AssertionError):
            detail = f"{detail}; error: {exc_type.__name__}: {exc}".lstrip("; ")
        line = f"{status} criterion {self.number}: {self.title} [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
