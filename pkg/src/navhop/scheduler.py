"""Job registry: the new / ckpt / finished status machine and its services.

All mutations go through one lock and are journaled as one JSON line each
before they take effect in memory; on startup the journal is replayed, so a
killed scheduler comes back with every job and claim it had acknowledged.
Rejected requests (stale sequences, bad transitions) are never journaled.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from . import wire
from .cmi import decode_cmi, decode_manifest
from .errors import (
    ClaimConflict,
    InvalidStatus,
    InvalidTransition,
    MissingBlob,
    MissingField,
    NavhopError,
    NotFound,
    ProtocolError,
    SchedulerUnreachable,
    StaleSequence,
)
from .runtime import job_namespace
from .store import BlobStore

log = logging.getLogger(__name__)

STATUSES = ("new", "ckpt", "finished")
DEFAULT_LEASE_SECS = 30.0


def natural_key(job_id: str) -> tuple:
    """Numeric-aware ordering: "2" < "10", "job-9" < "job-10"."""
    parts = tuple((0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", job_id) if t)
    return parts + ((2, 0, job_id),)


@dataclass
class JobRecord:
    job_id: str
    status: str = "new"
    app_name: str = ""
    input_keys: list[str] = field(default_factory=list)
    cmi_manifest_key: Optional[str] = None
    product_keys: list[str] = field(default_factory=list)
    ckpt_sequence: int = 0
    claimed_by: Optional[str] = None
    updated_at: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class Registry:
    def __init__(
        self,
        journal: str | os.PathLike | None = None,
        lease_secs: float = DEFAULT_LEASE_SECS,
        store: BlobStore | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.lease_secs = lease_secs
        self.store = store
        self.clock = clock
        self.jobs: dict[str, JobRecord] = {}
        self.nodes: dict[str, dict[str, Any]] = {}
        self._lease: dict[str, float] = {}
        self._lock = threading.RLock()
        self.journal_path = Path(journal) if journal else None
        self._journal_fd: int | None = None
        if self.journal_path is not None:
            self._replay()
            self._journal_fd = os.open(self.journal_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    # ---------------------------------------------------------- journal

    def _replay(self) -> None:
        path = self.journal_path
        if not path.exists():
            return
        data = path.read_bytes()
        good = 0
        for line in data.splitlines(keepends=True):
            if not line.endswith(b"\n"):
                break
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                break
            self._apply(rec)
            good += len(line)
        if good != len(data):
            # torn tail from a crash mid-append; drop it so later appends stay line-aligned
            log.warning("journal %s: discarding %d trailing bytes", path, len(data) - good)
            with open(path, "r+b") as fh:
                fh.truncate(good)

    def _commit(self, rec: dict[str, Any]) -> None:
        rec.setdefault("ts", self.clock())
        if self._journal_fd is not None:
            line = json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"
            os.write(self._journal_fd, line.encode("utf-8"))
            os.fsync(self._journal_fd)
        self._apply(rec)

    def _apply(self, rec: dict[str, Any]) -> None:
        op = rec["op"]
        ts = rec.get("ts", 0.0)
        if op == "node_up":
            self.nodes[rec["node_id"]] = {"node_id": rec["node_id"], "host": rec["host"], "port": rec["port"]}
            return
        if op == "node_down":
            self.nodes.pop(rec["node_id"], None)
            return
        if op == "add":
            self.jobs[rec["job_id"]] = JobRecord(
                job_id=rec["job_id"], app_name=rec["app_name"], input_keys=list(rec["input_keys"]), updated_at=ts
            )
            return
        job = self.jobs[rec["job_id"]]
        if op == "ckpt":
            job.status = "ckpt"
            job.cmi_manifest_key = rec["manifest_key"]
            job.ckpt_sequence = rec["sequence"]
        elif op == "finished":
            job.status = "finished"
            job.product_keys = list(rec["product_keys"])
            job.claimed_by = None
            self._lease.pop(job.job_id, None)
        elif op == "claim":
            job.claimed_by = rec["node_id"]
            self._lease[job.job_id] = self.clock() + self.lease_secs
        elif op == "release":
            job.claimed_by = None
            self._lease.pop(job.job_id, None)
        else:
            raise ValueError(f"unknown journal op {op!r}")
        job.updated_at = ts

    def close(self) -> None:
        if self._journal_fd is not None:
            os.close(self._journal_fd)
            self._journal_fd = None

    # ---------------------------------------------------------- helpers

    def _get(self, job_id: str) -> JobRecord:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise NotFound(f"no job {job_id!r}") from None

    def _claim_live(self, job: JobRecord) -> bool:
        return job.claimed_by is not None and self._lease.get(job.job_id, 0.0) > self.clock()

    def _ordered(self) -> list[JobRecord]:
        return [self.jobs[k] for k in sorted(self.jobs, key=natural_key)]

    def snapshot(self) -> bytes:
        """Canonical bytes of the whole registry (jobs and nodes)."""
        with self._lock:
            doc = {"jobs": [j.to_dict() for j in self._ordered()], "nodes": [self.nodes[n] for n in sorted(self.nodes)]}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    # ---------------------------------------------------------- services

    def add_job(self, job_id: str, app_name: str, input_keys: list[str] = ()) -> JobRecord:
        job_namespace(job_id)
        with self._lock:
            if job_id in self.jobs:
                raise InvalidTransition(f"job {job_id!r} already exists")
            self._commit({"op": "add", "job_id": job_id, "app_name": app_name, "input_keys": list(input_keys)})
            return self.jobs[job_id]

    def list_jobs(self) -> list[list[str]]:
        with self._lock:
            return [[j.job_id, j.status] for j in self._ordered()]

    def get_job(self, job_id: str | None = None, node_id: str | None = None) -> JobRecord | None:
        """One record by id, or claim the next unfinished job nobody holds a live claim on.

        Without ``node_id`` the next job is returned without being claimed.
        """
        with self._lock:
            if job_id is not None:
                return self._get(job_id)
            for job in self._ordered():
                if job.status == "finished":
                    continue
                if self._claim_live(job):
                    continue
                if node_id is not None:
                    self._commit({"op": "claim", "job_id": job.job_id, "node_id": node_id})
                return job
            return None

    def publish_job(self, job_id: str, status: str, keys: list[str], sequence: int,
                    node_id: str | None = None) -> JobRecord:
        if status not in ("ckpt", "finished"):
            raise InvalidStatus(f"cannot publish status {status!r}")
        with self._lock:
            job = self._get(job_id)
            if job.status == "finished":
                raise InvalidTransition(f"job {job_id} is finished")
            if not keys:
                raise MissingBlob("publish_job needs at least one blob key")
            if status == "ckpt":
                if sequence <= job.ckpt_sequence:
                    raise StaleSequence(f"job {job_id}: sequence {sequence} <= {job.ckpt_sequence}")
                self._check_checkpoint(keys[0])
                self._commit({"op": "ckpt", "job_id": job_id, "manifest_key": keys[0], "sequence": sequence})
            else:
                for key in keys:
                    self._check_blob(key)
                self._commit({"op": "finished", "job_id": job_id, "product_keys": list(keys)})
            return job

    def _check_blob(self, key: str) -> None:
        if self.store is not None and not self.store.exists(key):
            raise MissingBlob(f"blob {key} does not exist")

    def _check_checkpoint(self, mkey: str) -> None:
        if self.store is None:
            return
        try:
            manifest = decode_manifest(self.store.get(mkey))
            decode_cmi(self.store.get(manifest.cmi_blob_key))
        except NotFound as exc:
            raise MissingBlob(str(exc)) from None

    def claim(self, job_id: str, node_id: str, prev: str | None = None) -> JobRecord:
        """Take (or take over from ``prev``) the claim on a job."""
        with self._lock:
            job = self._get(job_id)
            if job.status == "finished":
                raise InvalidTransition(f"job {job_id} is finished")
            holder = job.claimed_by if self._claim_live(job) else None
            if holder not in (None, node_id, prev):
                raise ClaimConflict(f"job {job_id} is claimed by {holder}")
            self._commit({"op": "claim", "job_id": job_id, "node_id": node_id})
            return job

    def release(self, job_id: str, node_id: str) -> bool:
        with self._lock:
            job = self._get(job_id)
            if job.claimed_by != node_id:
                return False
            self._commit({"op": "release", "job_id": job_id, "node_id": node_id})
            return True

    def renew(self, node_id: str) -> list[str]:
        with self._lock:
            held = [j.job_id for j in self._ordered() if j.claimed_by == node_id]
            for job_id in held:
                self._lease[job_id] = self.clock() + self.lease_secs
            return held

    def requeue_dead(self, node_id: str) -> list[str]:
        with self._lock:
            released = [j.job_id for j in self._ordered() if j.claimed_by == node_id]
            for job_id in released:
                self._commit({"op": "release", "job_id": job_id, "node_id": node_id})
            if node_id in self.nodes:
                self._commit({"op": "node_down", "node_id": node_id})
            return released

    def register_node(self, node_id: str, host: str, port: int) -> None:
        with self._lock:
            if self.nodes.get(node_id) == {"node_id": node_id, "host": host, "port": port}:
                return
            self._commit({"op": "node_up", "node_id": node_id, "host": host, "port": int(port)})

    def lookup_node(self, node_id: str) -> dict[str, Any]:
        with self._lock:
            try:
                return dict(self.nodes[node_id])
            except KeyError:
                raise NotFound(f"no node {node_id!r}") from None


# ------------------------------------------------------------------ services over the wire


def _req(msg: dict[str, Any], name: str) -> Any:
    try:
        return msg[name]
    except KeyError:
        raise MissingField(f"request lacks {name!r}") from None


def dispatch(reg: Registry, msg: dict[str, Any]) -> dict[str, Any]:
    service = msg.get("service")
    if service == "list_jobs":
        return wire.ok(jobs=reg.list_jobs())
    if service == "get_job":
        job = reg.get_job(msg.get("job_id"), msg.get("node_id"))
        return wire.ok(job=job.to_dict() if job else None)
    if service == "publish_job":
        job = reg.publish_job(_req(msg, "job_id"), _req(msg, "status"), list(msg.get("keys", [])),
                              int(msg.get("sequence", 0)), msg.get("node_id"))
        return wire.ok(job=job.to_dict())
    if service == "add_job":
        job = reg.add_job(_req(msg, "job_id"), _req(msg, "app_name"), list(msg.get("input_keys", [])))
        return wire.ok(job=job.to_dict())
    if service == "claim":
        job = reg.claim(_req(msg, "job_id"), _req(msg, "node_id"), msg.get("prev"))
        return wire.ok(job=job.to_dict())
    if service == "release":
        return wire.ok(released=reg.release(_req(msg, "job_id"), _req(msg, "node_id")))
    if service == "renew":
        return wire.ok(jobs=reg.renew(_req(msg, "node_id")))
    if service == "requeue_dead":
        return wire.ok(jobs=reg.requeue_dead(_req(msg, "node_id")))
    if service == "register_node":
        reg.register_node(_req(msg, "node_id"), _req(msg, "host"), int(_req(msg, "port")))
        return wire.ok()
    if service == "lookup_node":
        return wire.ok(node=reg.lookup_node(_req(msg, "node_id")))
    if service == "health":
        return wire.ok(role="scheduler", jobs=len(reg.jobs), nodes=sorted(reg.nodes))
    raise ProtocolError(f"unknown service {service!r}")


class SchedulerClient:
    """Typed wrapper over the scheduler services; subclasses supply ``_call``."""

    def _call(self, msg: dict[str, Any]) -> dict[str, Any]:
        raise NotImplementedError

    def list_jobs(self) -> list[list[str]]:
        return self._call({"service": "list_jobs"})["jobs"]

    def get_job(self, job_id: str | None = None, node_id: str | None = None) -> dict | None:
        msg = {"service": "get_job"}
        if job_id is not None:
            msg["job_id"] = job_id
        if node_id is not None:
            msg["node_id"] = node_id
        return self._call(msg)["job"]

    def publish_job(self, job_id: str, status: str, keys: list[str], sequence: int,
                    node_id: str | None = None) -> dict:
        return self._call({"service": "publish_job", "job_id": job_id, "status": status,
                           "keys": list(keys), "sequence": sequence, "node_id": node_id})["job"]

    def add_job(self, job_id: str, app_name: str, input_keys: list[str] = ()) -> dict:
        return self._call({"service": "add_job", "job_id": job_id, "app_name": app_name,
                           "input_keys": list(input_keys)})["job"]

    def claim(self, job_id: str, node_id: str, prev: str | None = None) -> dict:
        return self._call({"service": "claim", "job_id": job_id, "node_id": node_id, "prev": prev})["job"]

    def release(self, job_id: str, node_id: str) -> bool:
        return self._call({"service": "release", "job_id": job_id, "node_id": node_id})["released"]

    def renew(self, node_id: str) -> list[str]:
        return self._call({"service": "renew", "node_id": node_id})["jobs"]

    def requeue_dead(self, node_id: str) -> list[str]:
        return self._call({"service": "requeue_dead", "node_id": node_id})["jobs"]

    def register_node(self, node_id: str, host: str, port: int) -> None:
        self._call({"service": "register_node", "node_id": node_id, "host": host, "port": port})

    def lookup_node(self, node_id: str) -> dict:
        return self._call({"service": "lookup_node", "node_id": node_id})["node"]


class LocalSchedulerClient(SchedulerClient):
    def __init__(self, registry: Registry):
        self.registry = registry

    def _call(self, msg):
        # round-trip through JSON so in-process callers see exactly the wire shapes
        return json.loads(json.dumps(dispatch(self.registry, json.loads(json.dumps(msg)))))


class RemoteSchedulerClient(SchedulerClient):
    def __init__(self, addr: tuple[str, int], timeout: float = 10.0):
        self.addr = addr
        self.timeout = timeout

    def _call(self, msg):
        return wire.call(self.addr, msg, timeout=self.timeout, unreachable=SchedulerUnreachable)


def serve(registry: Registry, host: str = "127.0.0.1", port: int = 0) -> wire.Server:
    return wire.Server((host, port), lambda msg: dispatch(registry, msg)).start()
