"""Spot-style preemption harness.

Runs a scheduler and one agent per topology node as separate OS processes,
feeds them jobs, and kills processes according to a ``KillSchedule``.  Agents
stream every event to the harness over a synchronous channel, so a kill
triggered by an event lands before the agent takes its next step.  Killed
agents are replaced by fresh ones with new node ids, which pick the job back
up from the scheduler.

``replay_verify`` checks a finished run against a fault-free baseline product
and against the invariants recoverable from the merged event log.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import queue
import selectors
import shutil
import signal
import socket
import socketserver
import subprocess
import sys
import tempfile
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import wire
from .colocation import HOP_APP, PUBLISH_APP, SEQ_APP, default_registry, submit_job
from .errors import NavhopError, SchedulerUnreachable
from .events import Event
from .runtime import NodeEnv, NodeDescriptor, start_fresh, Completed
from .scheduler import LocalSchedulerClient, Registry, RemoteSchedulerClient
from .store import LocalStore, MemoryStore

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

KILL_MODES = ("immediate", "notice")
ENTRY_KINDS = ("start", "restart", "resume")


# ------------------------------------------------------------------ configuration


@dataclass
class JobSpec:
    job_id: str
    app: str = PUBLISH_APP
    seed: Optional[int] = None
    n_fine: int = 100
    n_coarse: int = 20
    start_on: Optional[str] = None


@dataclass
class Topology:
    nodes: list[str]
    jobs: list[JobSpec] = field(default_factory=list)
    hop_other: Optional[str] = None
    max_concurrent_jobs: int = 1
    lease_secs: float = 30.0
    grace_ms: int = 500
    replace_killed: bool = True
    deadline_secs: float = 60.0
    poll_interval: float = 0.02
    retries: int = 3

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("topology needs at least one node")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("node ids must be unique")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Topology":
        cluster = dict(doc.get("cluster", {}))
        jobs = [JobSpec(**{**j, "job_id": str(j["job_id"])}) for j in doc.get("jobs", [])]
        return cls(jobs=jobs, **cluster)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Topology":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


@dataclass
class KillEvent:
    """One preemption: fire on the ``occurrence``-th event matching ``match``, or at ``at_ms``."""

    target: str = "@source"  # "@source" (the emitting node), a node id, or "scheduler"
    mode: str = "immediate"
    grace_ms: int = 500
    match: Optional[dict[str, Any]] = None
    occurrence: int = 1
    at_ms: Optional[int] = None
    stall_ms: int = 0  # hold the triggering event's ack back, modelling a slow step there

    def __post_init__(self):
        if self.mode not in KILL_MODES:
            raise ValueError(f"kill mode must be one of {KILL_MODES}")
        if (self.match is None) == (self.at_ms is None):
            raise ValueError("a kill needs exactly one trigger: match or at_ms")
        if self.occurrence < 1:
            raise ValueError("occurrence must be >= 1")
        if self.stall_ms < 0 or self.grace_ms < 0:
            raise ValueError("stall_ms and grace_ms must be >= 0")

    def matches(self, ev: Event) -> bool:
        if self.match is None:
            return False
        for k, v in self.match.items():
            if k == "key_glob":
                if not fnmatch.fnmatchcase(str(ev.get("key", "")), v):
                    return False
            elif ev.get(k) != v:
                return False
        return True


@dataclass
class KillSchedule:
    events: list[KillEvent]
    name: str = ""

    def validate(self, topology: Topology) -> None:
        for k in self.events:
            if k.target not in ("@source", "scheduler") and k.target not in topology.nodes:
                raise ValueError(f"kill target {k.target!r} is not in the topology")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "KillSchedule":
        return cls([KillEvent(**k) for k in doc.get("kill", [])], name=doc.get("name", ""))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "KillSchedule":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


# ------------------------------------------------------------------ report


@dataclass
class JobReport:
    job_id: str
    app: str
    status: str
    attempts: dict[int, int]
    cmis_emitted: int
    bytes_checkpointed: int
    wall_time: float
    product: Optional[bytes] = None

    def to_dict(self) -> dict[str, Any]:
        from .store import sha256_hex

        return {
            "job_id": self.job_id,
            "app": self.app,
            "status": self.status,
            "attempts": {str(k): v for k, v in sorted(self.attempts.items())},
            "cmis_emitted": self.cmis_emitted,
            "bytes_checkpointed": self.bytes_checkpointed,
            "wall_time": round(self.wall_time, 4),
            "product_sha256": sha256_hex(self.product) if self.product is not None else None,
            "product_bytes": len(self.product) if self.product is not None else None,
        }


@dataclass
class RunReport:
    scenario: str
    jobs: dict[str, JobReport]
    events: list[Event]
    kills: list[dict[str, Any]]
    recompute_ratio: float
    wall_time: float
    deadline_exceeded: bool = False
    torn_rejections: int = 0

    @property
    def all_finished(self) -> bool:
        return all(j.status == "finished" for j in self.jobs.values())

    def to_dict(self, include_events: bool = True) -> dict[str, Any]:
        doc = {
            "scenario": self.scenario,
            "jobs": {k: v.to_dict() for k, v in sorted(self.jobs.items())},
            "kills": self.kills,
            "recompute_ratio": self.recompute_ratio,
            "wall_time": round(self.wall_time, 4),
            "deadline_exceeded": self.deadline_exceeded,
            "torn_rejections": self.torn_rejections,
        }
        if include_events:
            doc["events"] = self.events
        return doc


def stage_counts(events: list[Event]) -> dict[str, Counter]:
    counts: dict[str, Counter] = defaultdict(Counter)
    for ev in events:
        if ev.get("kind") == "stage_start":
            counts[ev["job"]][ev["stage"]] += 1
    return counts


def recompute_ratio(events: list[Event]) -> float:
    counts = stage_counts(events)
    distinct = sum(len(c) for c in counts.values())
    if not distinct:
        return 0.0
    executed = sum(sum(c.values()) for c in counts.values())
    return (executed - distinct) / distinct


def build_report(scenario: str, jobs: list[JobSpec], statuses: dict[str, str], products: dict[str, bytes],
                 events: list[Event], kills: list[dict[str, Any]], wall_time: float,
                 deadline_exceeded: bool = False) -> RunReport:
    counts = stage_counts(events)
    per_job: dict[str, JobReport] = {}
    for spec in jobs:
        mine = [e for e in events if e.get("job") == spec.job_id]
        uploads = [e for e in mine if e["kind"] == "ckpt_cmi_uploaded"]
        ts = [e["ts"] for e in mine if "ts" in e]
        per_job[spec.job_id] = JobReport(
            job_id=spec.job_id,
            app=spec.app,
            status=statuses.get(spec.job_id, "unknown"),
            attempts=dict(sorted(counts.get(spec.job_id, Counter()).items())),
            cmis_emitted=len(uploads),
            bytes_checkpointed=sum(e.get("bytes", 0) for e in uploads),
            wall_time=(max(ts) - min(ts)) if ts else 0.0,
            product=products.get(spec.job_id),
        )
    torn = sum(1 for e in events if e.get("kind") == "restart_rejected")
    return RunReport(scenario, per_job, events, kills, recompute_ratio(events), wall_time,
                     deadline_exceeded, torn)


# ------------------------------------------------------------------ verification


@dataclass
class Verdict:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _stage_count(app: str) -> int:
    return len(default_registry(hop_other="-").get(app))


def check_events(events: list[Event], kill_free: bool) -> list[str]:
    """Invariants over a merged event log; returns human-readable violations."""
    violations: list[str] = []
    floor: dict[str, tuple[int, int]] = {}  # job -> (seq, stage) of the latest promoted CMI
    published: dict[str, int] = defaultdict(int)
    uploaded: dict[str, set[str]] = defaultdict(set)
    hopped_runs: set[str] = set()
    # job -> run -> {"node", "handoff"}
    active: dict[str, dict[str, dict[str, Any]]] = defaultdict(dict)
    seen_stage: Counter = Counter()

    def end_run(job: str, run: str | None) -> None:
        if run is not None:
            active[job].pop(run, None)

    for ev in events:
        kind = ev.get("kind")
        job = ev.get("job")
        run = ev.get("run")
        if kind in ("harness_kill", "harness_node_exit"):
            dead = ev.get("target")
            for runs in active.values():
                for r in [r for r, info in runs.items() if info["node"] == dead]:
                    runs.pop(r)
            continue
        if run is not None and run in hopped_runs:
            violations.append(f"post-hop activity: {kind} from run {run} after its hop completed")
        if job is None:
            continue
        if kind in ENTRY_KINDS:
            others = [r for r, info in active[job].items() if r != run and not info["handoff"]]
            if others:
                violations.append(f"job {job}: {kind} on {ev.get('node')} while run(s) {others} still active")
            active[job][run] = {"node": ev.get("node"), "handoff": False}
            seq, stage = floor.get(job, (0, 0))
            if kind == "start" and job in floor:
                violations.append(f"job {job}: fresh start although checkpoint seq {seq} was promoted")
            if kind in ("restart", "resume"):
                if (ev.get("seq"), ev.get("stage")) != (seq, stage):
                    violations.append(
                        f"job {job}: {kind} from seq {ev.get('seq')} stage {ev.get('stage')}, "
                        f"latest promoted is seq {seq} stage {stage}")
                if ev.get("digest") not in uploaded[job]:
                    violations.append(f"job {job}: {kind} from a CMI that was never fully uploaded")
        elif kind == "stage_start":
            stage = ev["stage"]
            seen_stage[(job, stage)] += 1
            if kill_free and seen_stage[(job, stage)] > 1:
                violations.append(f"job {job}: stage {stage} executed {seen_stage[(job, stage)]} times in a kill-free run")
            if job in floor and stage < floor[job][1]:
                violations.append(f"job {job}: stage {stage} re-executed below checkpoint stage {floor[job][1]}")
        elif kind == "ckpt_cmi_uploaded":
            seq = ev["seq"]
            if seq <= max(published[job], floor.get(job, (0, 0))[0]):
                violations.append(f"job {job}: CMI seq {seq} not above published/promoted sequence")
            uploaded[job].add(ev.get("digest"))
        elif kind == "ckpt_promoted":
            seq = ev["seq"]
            if job in floor and seq <= floor[job][0]:
                violations.append(f"job {job}: promoted seq {seq} does not advance past {floor[job][0]}")
            floor[job] = (seq, ev["stage"])
        elif kind == "ckpt_published":
            published[job] = max(published[job], ev["seq"])
        elif kind == "hop_request":
            if run in active[job]:
                active[job][run]["handoff"] = True
        elif kind == "hop_done":
            hopped_runs.add(run)
            end_run(job, run)
        elif kind in ("task_completed", "stage_failed"):
            end_run(job, run)
        elif kind == "hop_failed":
            if run in active[job]:
                active[job][run]["handoff"] = False
    return violations


def replay_verify(report: RunReport, baseline: bytes | dict[str, bytes]) -> Verdict:
    violations: list[str] = []
    if report.deadline_exceeded:
        violations.append("scenario deadline exceeded")
    for job_id, jr in sorted(report.jobs.items()):
        expected = baseline.get(job_id) if isinstance(baseline, dict) else baseline
        if jr.status != "finished":
            violations.append(f"job {job_id}: final status {jr.status}")
            continue
        if jr.product is None or jr.product != expected:
            violations.append(f"job {job_id}: product differs from baseline")
        for stage in range(_stage_count(jr.app)):
            if jr.attempts.get(stage, 0) < 1:
                violations.append(f"job {job_id}: stage {stage} never executed")
    violations.extend(check_events(report.events, kill_free=not report.kills))
    return Verdict(violations)


def baseline_products(jobs: list[JobSpec], seed: int = 7) -> dict[str, bytes]:
    """Products of a kill-free, single-node, zero-hop run of the sequential program."""
    store = MemoryStore()
    registry = Registry()
    sched = LocalSchedulerClient(registry)
    env = NodeEnv(NodeDescriptor("baseline", "127.0.0.1", 0), store, default_registry(), sched)
    products = {}
    for spec in jobs:
        s = spec.seed if spec.seed is not None else seed
        submit_job(store, sched, spec.job_id, SEQ_APP, s, spec.n_fine, spec.n_coarse)
        outcome = start_fresh(spec.job_id, SEQ_APP, env)
        if not isinstance(outcome, Completed):
            raise RuntimeError(f"baseline run of job {spec.job_id} did not complete: {outcome}")
        products[spec.job_id] = store.get(registry.jobs[spec.job_id].product_keys[0])
    return products


# ------------------------------------------------------------------ processes


class _EventServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, inbox: "queue.Queue[tuple[Event, threading.Event]]"):
        self.inbox = inbox
        self.closing = False
        super().__init__(("127.0.0.1", 0), _EventHandler)


class _EventHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock: socket.socket = self.request
        while not self.server.closing:
            try:
                ev = wire.read_frame(sock)
            except (OSError, wire.ProtocolError):
                return
            if ev is None:
                return
            done = threading.Event()
            self.server.inbox.put((ev, done))
            while not done.wait(0.25):
                if self.server.closing:
                    return
            try:
                wire.send_frame(sock, {"ok": True})
            except OSError:
                return


@dataclass
class _Proc:
    name: str
    popen: subprocess.Popen
    addr: tuple[str, int]


def _python_env() -> dict[str, str]:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def _read_ready(popen: subprocess.Popen, timeout: float) -> tuple[str, tuple[str, int]]:
    fd = popen.stdout.fileno()
    sel = selectors.DefaultSelector()
    sel.register(fd, selectors.EVENT_READ)
    buf = b""
    deadline = time.monotonic() + timeout
    try:
        while b"\n" not in buf:
            left = deadline - time.monotonic()
            if left <= 0 or not sel.select(left):
                raise RuntimeError("process did not become ready in time")
            chunk = os.read(fd, 256)
            if not chunk:
                raise RuntimeError(f"process exited before ready (code {popen.poll()})")
            buf += chunk
    finally:
        sel.close()
    parts = buf.split(b"\n", 1)[0].decode().split()
    if len(parts) != 3 or parts[0] != "READY":
        raise RuntimeError(f"unexpected ready line {parts!r}")
    return parts[1], wire.parse_addr(parts[2])


class _Run:
    def __init__(self, topology: Topology, jobs: list[JobSpec], schedule: KillSchedule, seed: int,
                 workdir: Path):
        self.topology = topology
        self.jobs = jobs
        self.schedule = schedule
        self.seed = seed
        self.workdir = workdir
        self.store_root = workdir / "store"
        self.journal = workdir / "scheduler.journal"
        self.logdir = workdir / "logs"
        self.logdir.mkdir(parents=True, exist_ok=True)
        self.inbox: queue.Queue = queue.Queue()
        self.events: list[Event] = []
        self.kills: list[dict[str, Any]] = []
        self.agents: dict[str, _Proc] = {}
        self.draining: dict[str, _Proc] = {}
        self.scheduler: Optional[_Proc] = None
        self.sched_client: Optional[RemoteSchedulerClient] = None
        self.seen: Counter = Counter()
        self.deferred: list[tuple[float, threading.Event]] = []
        self.stall = 0.0
        self.fired: set[int] = set()
        self.replacements: Counter = Counter()
        self.started = time.monotonic()
        self.cluster_up = self.started
        self.event_server = _EventServer(self.inbox)
        threading.Thread(target=self.event_server.serve_forever, args=(0.05,), daemon=True).start()
        self.pyenv = _python_env()

    # ---------------------------------------------------------- process control

    def _spawn(self, name: str, args: list[str]) -> _Proc:
        errlog = open(self.logdir / f"{name}.log", "ab")
        popen = subprocess.Popen([sys.executable, "-m", "navhop.cli", *args], stdout=subprocess.PIPE,
                                 stderr=errlog, env=self.pyenv, close_fds=True)
        errlog.close()
        try:
            _, addr = _read_ready(popen, 30.0)
        except Exception:
            popen.kill()
            popen.wait()
            raise
        return _Proc(name, popen, addr)

    def _spawn_scheduler(self, port: int = 0) -> None:
        self.scheduler = self._spawn("scheduler", [
            "scheduler", "--listen", f"127.0.0.1:{port}", "--journal", str(self.journal),
            "--lease-secs", str(self.topology.lease_secs), "--store-root", str(self.store_root)])
        self.sched_client = RemoteSchedulerClient(self.scheduler.addr, timeout=5.0)

    def _spawn_agent(self, node_id: str) -> _Proc:
        t = self.topology
        args = ["agent", "--node-id", node_id, "--listen", "127.0.0.1:0", "--store-root", str(self.store_root),
                "--scheduler", wire.format_addr(self.scheduler.addr), "--poll",
                "--poll-interval", str(t.poll_interval), "--max-jobs", str(t.max_concurrent_jobs),
                "--kill-grace-ms", str(t.grace_ms), "--retries", str(t.retries),
                "--heartbeat-secs", str(max(t.lease_secs / 3.0, 0.05)),
                "--events", wire.format_addr(self.event_server.server_address[:2])]
        if t.hop_other:
            args += ["--hop-other", t.hop_other]
        proc = self._spawn(node_id, args)
        self.agents[node_id] = proc
        self._log("harness_spawn", target=node_id, pid=proc.popen.pid)
        return proc

    def _log(self, kind: str, **fields: Any) -> None:
        ev = {"kind": kind, "node": "harness", "ts": time.time(), "order": len(self.events), **fields}
        self.events.append(ev)

    def _sched(self, fn, attempts: int = 50):
        for i in range(attempts):
            try:
                return fn(self.sched_client)
            except SchedulerUnreachable:
                time.sleep(0.1)
        raise SchedulerUnreachable("scheduler did not come back")

    # ---------------------------------------------------------- lifecycle

    def start(self) -> None:
        self.schedule.validate(self.topology)
        self._spawn_scheduler()
        store = LocalStore(self.store_root)
        for spec in self.jobs:
            seed = spec.seed if spec.seed is not None else self.seed
            submit_job(store, self.sched_client, spec.job_id, spec.app, seed, spec.n_fine, spec.n_coarse)
            if spec.start_on:
                self.sched_client.claim(spec.job_id, spec.start_on)
        for node_id in self.topology.nodes:
            self._spawn_agent(node_id)
        for spec in self.jobs:
            if spec.start_on:
                wire.call(self.agents[spec.start_on].addr, {"service": "start", "job_id": spec.job_id})
        self.cluster_up = time.monotonic()

    def _after_death(self, node_id: str) -> None:
        self.agents.pop(node_id, None)
        self.draining.pop(node_id, None)
        released = self._sched(lambda c: c.requeue_dead(node_id))
        self._log("harness_requeue", target=node_id, jobs=released)
        if self.topology.replace_killed:
            base = node_id.split("-r")[0]
            self.replacements[base] += 1
            self._spawn_agent(f"{base}-r{self.replacements[base]}")

    def _fire(self, idx: int, kill: KillEvent, source: Event | None) -> None:
        self.fired.add(idx)
        target = source.get("node") if (kill.target == "@source" and source) else kill.target
        record = {"index": idx, "target": target, "mode": kill.mode,
                  "trigger": source.get("kind") if source else f"at_ms={kill.at_ms}",
                  "at": round(time.monotonic() - self.started, 4)}
        self.kills.append(record)
        if target == "scheduler":
            port = self.scheduler.addr[1]
            self.scheduler.popen.kill()
            self.scheduler.popen.wait()
            self._log("harness_kill", target="scheduler")
            self._spawn_scheduler(port)
            return
        proc = self.agents.get(target)
        if proc is None or proc.popen.poll() is not None:
            record["skipped"] = True
            return
        if kill.mode == "immediate":
            proc.popen.send_signal(signal.SIGKILL)
            proc.popen.wait()
            self._log("harness_kill", target=target)
            self._after_death(target)
        else:
            self._log("harness_notice", target=target, grace_ms=kill.grace_ms)
            try:
                with socket.create_connection(proc.addr, timeout=2.0) as sock:
                    wire.send_frame(sock, {"service": "kill", "mode": "notice", "grace_ms": kill.grace_ms})
            except OSError:
                pass
            self.draining[target] = proc

    def _on_event(self, ev: Event) -> float:
        """Handle one event; returns how long to hold its ack back."""
        stall = 0.0
        for idx, kill in enumerate(self.schedule.events):
            if idx in self.fired or not kill.matches(ev):
                continue
            self.seen[idx] += 1
            if self.seen[idx] == kill.occurrence:
                self._fire(idx, kill, ev)
                stall = max(stall, kill.stall_ms / 1000.0)
        return stall

    def _tick(self) -> None:
        now = time.monotonic()
        for item in [d for d in self.deferred if d[0] <= now]:
            self.deferred.remove(item)
            item[1].set()
        elapsed_ms = (time.monotonic() - self.cluster_up) * 1000
        for idx, kill in enumerate(self.schedule.events):
            if kill.at_ms is not None and idx not in self.fired and elapsed_ms >= kill.at_ms:
                self._fire(idx, kill, None)
        for node_id, proc in list(self.draining.items()):
            if proc.popen.poll() is not None:
                self._log("harness_node_exit", target=node_id, code=proc.popen.returncode)
                self._after_death(node_id)

    def loop(self) -> bool:
        """Pump events until every job is finished; False if the deadline passed first."""
        deadline = self.started + self.topology.deadline_secs
        next_check = 0.0
        while True:
            if time.monotonic() > deadline:
                return False
            try:
                ev, done = self.inbox.get(timeout=0.01)
            except queue.Empty:
                ev = None
            if ev is not None:
                ev["order"] = len(self.events)
                self.events.append(ev)
                stall = 0.0
                try:
                    stall = self._on_event(ev)
                finally:
                    if stall > 0:
                        self.deferred.append((time.monotonic() + stall, done))
                    else:
                        done.set()
                continue
            self._tick()
            now = time.monotonic()
            if now >= next_check:
                next_check = now + 0.05
                try:
                    statuses = dict(self.sched_client.list_jobs())
                except SchedulerUnreachable:
                    statuses = {}
                if statuses and all(statuses.get(j.job_id) == "finished" for j in self.jobs):
                    return True

    def statuses_and_products(self) -> tuple[dict[str, str], dict[str, bytes]]:
        store = LocalStore(self.store_root)
        statuses, products = {}, {}
        for spec in self.jobs:
            try:
                rec = self._sched(lambda c: c.get_job(spec.job_id), attempts=10)
            except NavhopError:
                continue
            statuses[spec.job_id] = rec["status"]
            if rec["status"] == "finished":
                products[spec.job_id] = store.get(rec["product_keys"][0])
        return statuses, products

    def shutdown(self) -> None:
        self.event_server.closing = True
        procs = list(self.agents.values()) + list(self.draining.values())
        if self.scheduler is not None:
            procs.append(self.scheduler)
        for p in procs:
            if p.popen.poll() is None:
                p.popen.kill()
        for p in procs:
            p.popen.wait()
            if p.popen.stdout:
                p.popen.stdout.close()
        # release any agent still blocked on an ack
        for _, done in self.deferred:
            done.set()
        while True:
            try:
                _, done = self.inbox.get_nowait()
                done.set()
            except queue.Empty:
                break
        self.event_server.shutdown()
        self.event_server.server_close()


def run_scenario(topology: Topology, jobs: list[JobSpec] | None, schedule: KillSchedule, seed: int = 7,
                 workdir: str | os.PathLike | None = None) -> RunReport:
    """Run ``jobs`` on a fresh process cluster under ``schedule``; returns the run report."""
    jobs = list(jobs if jobs is not None else topology.jobs)
    own_dir = workdir is None
    wd = Path(tempfile.mkdtemp(prefix="navhop-run-")) if own_dir else Path(workdir)
    run = _Run(topology, jobs, schedule, seed, wd)
    finished = False
    try:
        run.start()
        finished = run.loop()
        statuses, products = run.statuses_and_products()
    finally:
        run.shutdown()
    wall = time.monotonic() - run.started
    report = build_report(schedule.name, jobs, statuses, products, run.events, run.kills, wall,
                          deadline_exceeded=not finished)
    if own_dir:
        shutil.rmtree(wd, ignore_errors=True)
    return report


# ------------------------------------------------------------------ scenario catalogue


def _kill(match: dict[str, Any], occurrence: int = 1) -> KillEvent:
    return KillEvent(target="@source", mode="immediate", match=match, occurrence=occurrence)


def kill_point_sweep(job_id: str = "1") -> list[KillSchedule]:
    """One immediate kill per instrumented point of the publish-variant job.

    Covers every stage boundary, mid-stage points, a torn CMI upload, the
    window between CMI upload and manifest promotion, the window between
    promotion and the scheduler update, a torn manifest and the product upload.
    """
    j = job_id
    cmi_glob = f"job-{j}/cmi/*"
    points: list[tuple[str, dict[str, Any], int]] = []
    for stage in range(len(default_registry().get(PUBLISH_APP))):
        points.append((f"stage-{stage}-start", {"kind": "stage_start", "job": j, "stage": stage}, 1))
    for stage in (0, 3, 4, 6):
        points.append((f"stage-{stage}-mid", {"kind": "stage_mid", "job": j, "stage": stage}, 1))
    points += [
        ("cmi-1-torn-upload", {"kind": "store_partial", "key_glob": cmi_glob}, 1),
        ("cmi-2-torn-upload", {"kind": "store_partial", "key_glob": cmi_glob}, 2),
        ("cmi-1-uploaded-manifest-pending", {"kind": "ckpt_cmi_uploaded", "job": j, "seq": 1}, 1),
        ("cmi-2-uploaded-manifest-pending", {"kind": "ckpt_cmi_uploaded", "job": j, "seq": 2}, 1),
        ("manifest-1-torn", {"kind": "store_partial", "key_glob": f"job-{j}/current.manifest"}, 1),
        ("ckpt-1-promoted-unpublished", {"kind": "ckpt_promoted", "job": j, "seq": 1}, 1),
        ("ckpt-2-promoted-unpublished", {"kind": "ckpt_promoted", "job": j, "seq": 2}, 1),
        ("ckpt-2-published", {"kind": "ckpt_published", "job": j, "seq": 2}, 1),
        ("product-torn-upload", {"kind": "store_partial", "key_glob": f"job-{j}/product/*"}, 1),
        ("product-uploaded-unpublished", {"kind": "product_uploaded", "job": j}, 1),
    ]
    return [KillSchedule([_kill(m, occ)], name=name) for name, m, occ in points]


def short_notice(job_id: str = "1", grace_ms: int = 100, upload_ms: int = 1000) -> KillSchedule:
    """A spot notice whose grace is shorter than the checkpoint upload in flight.

    The notice lands as the second CMI upload begins and the upload is slowed
    to ``upload_ms``, so the node is gone before the CMI is promoted; the job
    must fall back to the first checkpoint.
    """
    return KillSchedule([KillEvent(target="@source", mode="notice", grace_ms=grace_ms, stall_ms=upload_ms,
                                   match={"kind": "store_partial", "key_glob": f"job-{job_id}/cmi/*"},
                                   occurrence=2)], name="notice-shorter-than-checkpoint")
