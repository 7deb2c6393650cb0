"""Per-node NBS service: accepts hop handoffs, starts and resumes tasks.

Services (see PROTOCOL.md): ``hop``, ``start``, ``health`` and ``kill``.
A hop handoff is acknowledged only after the manifest and CMI have been
fetched and validated and the scheduler claim has moved to this node; the
source task unwinds only after that acknowledgement.
"""

from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import wire
from .errors import (
    Busy,
    Draining,
    InvalidTransition,
    NavhopError,
    NodeUnreachable,
    NotFound,
    ProtocolError,
    SchedulerUnreachable,
)
from .events import EventSink
from .runtime import (
    AppRegistry,
    Completed,
    Failed,
    HopRequest,
    LoadedCheckpoint,
    NodeDescriptor,
    NodeEnv,
    RetryPolicy,
    TaskOutcome,
    load_checkpoint,
    manifest_key,
    restart,
    resume,
    start_fresh,
)
from .scheduler import SchedulerClient
from .store import BlobStore

log = logging.getLogger(__name__)

KILL_MODES = ("immediate", "notice")


@dataclass
class AgentConfig:
    node: NodeDescriptor
    store_root: str
    scheduler: tuple[str, int]
    registered_apps: list[str] = field(default_factory=lambda: ["colocation"])
    max_concurrent_jobs: int = 1
    poll: bool = False
    poll_interval: float = 0.05
    heartbeat_secs: float = 5.0
    kill_grace_ms: int = 500
    hop_other: Optional[str] = None

    def __post_init__(self):
        if self.max_concurrent_jobs < 1:
            raise ValueError("max_concurrent_jobs must be >= 1")


def tcp_hop_transport(timeout: float = 30.0) -> Callable[[NodeDescriptor, HopRequest], dict]:
    def send(dest: NodeDescriptor, req: HopRequest) -> dict:
        return wire.call(dest.addr, req.to_wire(), timeout=timeout, unreachable=NodeUnreachable)

    return send


def scheduler_resolver(scheduler: SchedulerClient) -> Callable[[str], Optional[NodeDescriptor]]:
    def resolve(node_id: str) -> Optional[NodeDescriptor]:
        try:
            n = scheduler.lookup_node(node_id)
        except (NotFound, SchedulerUnreachable):
            return None
        return NodeDescriptor(n["node_id"], n["host"], int(n["port"]))

    return resolve


class Agent:
    def __init__(
        self,
        node: NodeDescriptor,
        store: BlobStore,
        registry: AppRegistry,
        scheduler: SchedulerClient,
        events: EventSink | None = None,
        max_concurrent_jobs: int = 1,
        resolve: Callable[[str], Optional[NodeDescriptor]] | None = None,
        send_hop: Callable[[NodeDescriptor, HopRequest], dict] | None = None,
        exit_fn: Callable[[int], Any] = os._exit,
        retry: RetryPolicy | None = None,
        kill_grace_ms: int = 500,
    ):
        self.node = node
        self.scheduler = scheduler
        self.registry = registry
        self.max_concurrent_jobs = max_concurrent_jobs
        self.exit_fn = exit_fn
        self.kill_grace_ms = kill_grace_ms
        self.events = events or EventSink(node.node_id)
        self.env = NodeEnv(
            node=node,
            store=store,
            registry=registry,
            scheduler=scheduler,
            events=self.events,
            resolve=resolve or scheduler_resolver(scheduler),
            send_hop=send_hop or tcp_hop_transport(),
            retry=retry or RetryPolicy(),
        )
        self.started_at = time.monotonic()
        self.draining = False
        self.stopped = threading.Event()
        self.outcomes: list[tuple[str, TaskOutcome]] = []
        self._workers: dict[int, str] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    # ---------------------------------------------------------- worker table

    def running_jobs(self) -> list[str]:
        with self._lock:
            return sorted(set(self._workers.values()))

    def _reserve(self, job_id: str, same_job_exempt: bool = False) -> int:
        with self._lock:
            if self.draining:
                raise Draining(f"{self.node.node_id} is shutting down")
            busy = [j for j in self._workers.values() if not (same_job_exempt and j == job_id)]
            if len(busy) >= self.max_concurrent_jobs:
                raise Busy(f"{self.node.node_id} is running {len(busy)} job(s)")
            wid = next(self._ids)
            self._workers[wid] = job_id
            return wid

    def _free(self, wid: int) -> None:
        with self._lock:
            self._workers.pop(wid, None)

    def _spawn(self, wid: int, job_id: str, fn: Callable[[], TaskOutcome]) -> threading.Thread:
        def body():
            try:
                try:
                    outcome = fn()
                except NavhopError as exc:
                    outcome = Failed(exc)
                self._finish(job_id, outcome)
            finally:
                self._free(wid)

        t = threading.Thread(target=body, name=f"job-{job_id}-w{wid}", daemon=True)
        t.start()
        return t

    def _finish(self, job_id: str, outcome: TaskOutcome) -> None:
        self.outcomes.append((job_id, outcome))
        if isinstance(outcome, Failed):
            log.warning("job %s failed on %s: %s", job_id, self.node.node_id, outcome.error)
            self.events.emit("job_failed", job=job_id, stage=outcome.stage, error=outcome.error.code,
                             message=str(outcome.error))
            try:
                self.scheduler.release(job_id, self.node.node_id)
            except NavhopError as exc:
                log.warning("could not release claim on %s: %s", job_id, exc)
        elif isinstance(outcome, Completed):
            self.events.emit("job_completed", job=job_id)

    # ---------------------------------------------------------- services

    def svc_hop(self, req: HopRequest) -> dict:
        wid = self._reserve(req.job_id, same_job_exempt=True)
        try:
            ckpt: LoadedCheckpoint = load_checkpoint(req.job_id, self.env, req.manifest_key)
            self.scheduler.claim(req.job_id, self.node.node_id, prev=req.source_node)
        except BaseException:
            self._free(wid)
            raise
        self.events.emit("hop_accepted", job=req.job_id, source=req.source_node,
                         seq=ckpt.manifest.sequence, stage=ckpt.manifest.stage)
        self._spawn(wid, req.job_id, lambda: resume(ckpt, self.env, via="resume"))
        return wire.ok(job_id=req.job_id, node_id=self.node.node_id, sequence=ckpt.manifest.sequence)

    def svc_start(self, job_id: str, app_name: str | None = None) -> dict:
        if app_name is not None:
            self.registry.get(app_name)
        record = self.scheduler.get_job(job_id)
        if record["status"] == "finished":
            raise InvalidTransition(f"job {job_id} is already finished")
        self.registry.get(record["app_name"])
        wid = self._reserve(job_id)
        try:
            self.scheduler.claim(job_id, self.node.node_id)
        except BaseException:
            self._free(wid)
            raise
        self._spawn(wid, job_id, lambda: self._dispatch(record))
        return wire.ok(job_id=job_id, node_id=self.node.node_id, status=record["status"])

    def _dispatch(self, record: dict) -> TaskOutcome:
        """Fresh start for a new job, resume for a checkpointed one.

        The promoted manifest in the store is authoritative: a job still listed
        as new whose first checkpoint was promoted just before a crash resumes
        from that checkpoint rather than starting over.
        """
        job_id = record["job_id"]
        if record["status"] == "ckpt" or self.env.store.exists(manifest_key(job_id)):
            return restart(job_id, self.env)
        return start_fresh(job_id, record["app_name"], self.env)

    def svc_health(self) -> dict:
        return wire.ok(node_id=self.node.node_id, running_jobs=self.running_jobs(),
                       uptime=round(time.monotonic() - self.started_at, 3), draining=self.draining)

    def svc_kill(self, mode: str, grace_ms: int | None = None) -> None:
        if mode not in KILL_MODES:
            raise ProtocolError(f"kill mode must be one of {KILL_MODES}")
        if mode == "immediate":
            self.exit_fn(137)
            return
        grace = (self.kill_grace_ms if grace_ms is None else int(grace_ms)) / 1000.0
        with self._lock:
            self.draining = True

        def expire():
            time.sleep(grace)
            code = 0 if not self.running_jobs() else 143
            self.stopped.set()
            self.exit_fn(code)

        # arm the timer first: emitting can block behind a worker's in-flight event
        threading.Thread(target=expire, name="kill-notice", daemon=True).start()
        self.events.emit("kill_notice", grace_ms=int(grace * 1000), running=self.running_jobs())

    def handle(self, msg: dict) -> dict | None:
        service = msg.get("service")
        if service == "hop":
            return self.svc_hop(HopRequest.from_wire(msg))
        if service == "start":
            return self.svc_start(str(msg["job_id"]), msg.get("app_name"))
        if service == "health":
            return self.svc_health()
        if service == "kill":
            self.svc_kill(str(msg.get("mode", "immediate")), msg.get("grace_ms"))
            return None
        raise ProtocolError(f"unknown service {service!r}")

    # ---------------------------------------------------------- background loops

    def poll_once(self) -> bool:
        """Claim and launch the next job if there is room.  True if one was launched."""
        if self.draining:
            return False
        with self._lock:
            if len(self._workers) >= self.max_concurrent_jobs:
                return False
        try:
            record = self.scheduler.get_job(node_id=self.node.node_id)
        except SchedulerUnreachable:
            return False
        if record is None:
            return False
        try:
            wid = self._reserve(record["job_id"])
        except (Busy, Draining):
            self.scheduler.release(record["job_id"], self.node.node_id)
            return False
        self.events.emit("claimed", job=record["job_id"], status=record["status"])
        self._spawn(wid, record["job_id"], lambda: self._dispatch(record))
        return True

    def poll_forever(self, interval: float = 0.05) -> None:
        while not self.stopped.is_set() and not self.draining:
            launched = self.poll_once()
            if not launched:
                self.stopped.wait(interval)

    def heartbeat_forever(self, interval: float) -> None:
        while not self.stopped.wait(interval):
            try:
                self.scheduler.renew(self.node.node_id)
            except NavhopError as exc:
                log.debug("heartbeat failed: %s", exc)

    def start_background(self, poll: bool, poll_interval: float = 0.05, heartbeat_secs: float = 5.0) -> None:
        if poll:
            threading.Thread(target=self.poll_forever, args=(poll_interval,), name="poll", daemon=True).start()
        threading.Thread(target=self.heartbeat_forever, args=(heartbeat_secs,), name="heartbeat",
                         daemon=True).start()

    def stop(self) -> None:
        self.stopped.set()

    def wait_idle(self, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not self.running_jobs():
                return True
            time.sleep(0.01)
        return False


def launch(node_id: str, store: BlobStore, registry: AppRegistry, scheduler: SchedulerClient,
           host: str = "127.0.0.1", port: int = 0, **kwargs: Any) -> tuple[Agent, wire.Server]:
    """Bind the agent's server, build the agent around the bound address, register it."""
    holder: dict[str, Agent] = {}
    server = wire.Server((host, port), lambda msg: holder["agent"].handle(msg))
    node = NodeDescriptor(node_id, *server.addr)
    agent = Agent(node, store, registry, scheduler, **kwargs)
    holder["agent"] = agent
    server.start()
    scheduler.register_node(node.node_id, node.host, node.port)
    return agent, server
