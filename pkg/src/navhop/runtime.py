"""The DHP task runtime: resumable stage machines with hop() and publish().

A task is an ordered list of stages.  Checkpoints are only taken at stage
boundaries: by the time a stage's step runs, ``state.next_stage`` already
points past it, so a CMI captured from inside the step resumes at the next
stage.

``hop`` is checkpoint-then-terminate: upload the CMI, promote the manifest,
ask the destination's ``svc/hop`` to take over, and once it acknowledges,
unwind the local task.  ``publish(..., "ckpt")`` is checkpoint-then-continue.
"""

from __future__ import annotations

import itertools
import logging
import os
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Protocol, Union

from .cmi import (
    CheckpointImage,
    RestartManifest,
    decode_cmi,
    decode_manifest,
    encode_cmi,
    encode_manifest,
)
from .errors import (
    DigestMismatch,
    HopRejected,
    InvalidStatus,
    ManifestMismatch,
    MissingField,
    NavhopError,
    NodeUnreachable,
    NoCheckpoint,
    NotFound,
    SchedulerUnreachable,
    StageFailure,
    StaleSequence,
    StateDecodeError,
    StoreUnavailable,
    UnknownApp,
)
from .events import EventSink, run_context
from .state import TaskState, deserialize_state
from .store import BlobStore, sha256_hex

log = logging.getLogger(__name__)

PUBLISH_STATUSES = ("ckpt", "finished")
_JOB_ID = re.compile(r"^[A-Za-z0-9._\-]+$")


# ------------------------------------------------------------------ keys


def job_namespace(job_id: str) -> str:
    if not _JOB_ID.match(job_id) or job_id.startswith("."):
        raise ValueError(f"job id {job_id!r} is not usable as a store namespace")
    return f"job-{job_id}"


def manifest_key(job_id: str) -> str:
    return f"{job_namespace(job_id)}/current.manifest"


def cmi_key(job_id: str, sequence: int) -> str:
    return f"{job_namespace(job_id)}/cmi/{sequence:010d}.cmi"


def product_key(job_id: str, name: str) -> str:
    return f"{job_namespace(job_id)}/product/{name}"


def input_key(job_id: str, name: str) -> str:
    return f"{job_namespace(job_id)}/input/{name}"


# ------------------------------------------------------------------ types


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    host: str
    port: int

    @property
    def addr(self) -> tuple[str, int]:
        return (self.host, self.port)


StepFn = Callable[[TaskState, "NodeEnv"], Optional[TaskState]]


@dataclass(frozen=True)
class Stage:
    index: int
    label: str
    step: StepFn


class StageMachine:
    def __init__(self, app_name: str, stages: Iterable[Union[Stage, tuple[str, StepFn]]]):
        self.app_name = app_name
        built: list[Stage] = []
        for i, s in enumerate(stages):
            if not isinstance(s, Stage):
                s = Stage(i, *s)
            if s.index != i:
                raise ValueError(f"stage indices must be contiguous from 0; got {s.index} at position {i}")
            built.append(s)
        self.stages = tuple(built)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> Stage:
        return self.stages[i]

    def labels(self) -> list[str]:
        return [s.label for s in self.stages]


class AppRegistry:
    def __init__(self, machines: Iterable[StageMachine] = ()):
        self._apps: dict[str, StageMachine] = {}
        for m in machines:
            self.register(m)

    def register(self, machine: StageMachine) -> None:
        self._apps[machine.app_name] = machine

    def get(self, app_name: str) -> StageMachine:
        try:
            return self._apps[app_name]
        except KeyError:
            raise UnknownApp(f"app {app_name!r} is not registered") from None

    def __contains__(self, app_name: str) -> bool:
        return app_name in self._apps

    def names(self) -> list[str]:
        return sorted(self._apps)


@dataclass(frozen=True)
class HopRequest:
    job_id: str
    manifest_key: str
    source_node: str

    def to_wire(self) -> dict[str, Any]:
        return {"service": "hop", "job_id": self.job_id, "manifest_key": self.manifest_key,
                "source_node": self.source_node}

    @classmethod
    def from_wire(cls, msg: dict[str, Any]) -> "HopRequest":
        try:
            return cls(str(msg["job_id"]), str(msg["manifest_key"]), str(msg["source_node"]))
        except KeyError as exc:
            raise MissingField(f"hop request lacks {exc.args[0]}") from None


@dataclass
class Completed:
    state: TaskState


@dataclass
class Migrated:
    dest: NodeDescriptor
    sequence: int


@dataclass
class Failed:
    error: NavhopError
    stage: Optional[int] = None


TaskOutcome = Union[Completed, Migrated, Failed]


class SchedulerAPI(Protocol):
    def publish_job(self, job_id: str, status: str, keys: list[str], sequence: int,
                    node_id: str | None = None) -> dict: ...


@dataclass
class RetryPolicy:
    retries: int = 3
    base_delay: float = 0.1
    sleep: Callable[[float], None] = time.sleep

    def run(self, fn: Callable[[], Any], retry_on: tuple[type[BaseException], ...]):
        delay = self.base_delay
        for attempt in range(self.retries + 1):
            try:
                return fn()
            except retry_on:
                if attempt == self.retries:
                    raise
                self.sleep(delay)
                delay *= 2


def _no_transport(dest: NodeDescriptor, req: HopRequest) -> dict:
    raise NodeUnreachable(f"no hop transport configured (to {dest.node_id})")


@dataclass
class NodeEnv:
    """Everything a task needs from the node it currently runs on."""

    node: NodeDescriptor
    store: BlobStore
    registry: AppRegistry
    scheduler: Optional[SchedulerAPI] = None
    events: EventSink = field(default_factory=EventSink)
    resolve: Callable[[str], Optional[NodeDescriptor]] = lambda node_id: None
    send_hop: Callable[[NodeDescriptor, HopRequest], dict] = _no_transport
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    clock: Callable[[], float] = time.time

    def emit(self, kind: str, state: TaskState | None = None, **fields: Any) -> None:
        if state is not None:
            fields.setdefault("job", state.job_id)
        self.events.emit(kind, **fields)


class _Migrated(BaseException):
    # BaseException so application code catching Exception cannot swallow the unwind
    def __init__(self, dest: NodeDescriptor, sequence: int):
        self.dest = dest
        self.sequence = sequence


# ------------------------------------------------------------------ checkpointing


def _store_call(env: NodeEnv, fn: Callable[[], Any]):
    return env.retry.run(fn, (StoreUnavailable,))


def _scheduler_call(env: NodeEnv, fn: Callable[[], Any]):
    return env.retry.run(fn, (SchedulerUnreachable,))


def checkpoint(state: TaskState, env: NodeEnv, reason: str = "ckpt") -> RestartManifest:
    """Capture ``state`` as a new CMI and promote it to the job's current checkpoint.

    Upload order is CMI first, manifest second; the manifest write is the
    commit point.  The previous CMI blob is removed only after the new manifest
    is in place.  Returns the promoted manifest; ``state.ckpt_sequence`` is
    advanced on success.
    """
    job = state.job_id
    seq = state.ckpt_sequence + 1
    snapshot = state.copy()
    snapshot.ckpt_sequence = seq
    blob = encode_cmi(job, seq, snapshot.next_stage, snapshot.serialize(), created_at=int(env.clock()))
    key = cmi_key(job, seq)
    _store_call(env, lambda: env.store.put_atomic(key, blob))
    env.emit("ckpt_cmi_uploaded", state, seq=seq, stage=snapshot.next_stage, bytes=len(blob),
             digest=sha256_hex(blob), reason=reason)

    manifest = RestartManifest(job, key, state.app_name, snapshot.next_stage, seq)
    mkey = manifest_key(job)
    _store_call(env, lambda: env.store.put_atomic(mkey, encode_manifest(manifest)))
    state.ckpt_sequence = seq
    env.emit("ckpt_promoted", state, seq=seq, stage=snapshot.next_stage, reason=reason)
    _prune_old_cmis(env, job, keep=key)
    return manifest


def _prune_old_cmis(env: NodeEnv, job_id: str, keep: str) -> None:
    try:
        for meta in env.store.list(job_namespace(job_id)):
            if meta.key.name.startswith("cmi/") and str(meta.key) != keep:
                try:
                    env.store.delete(meta.key)
                except NotFound:
                    pass
    except StoreUnavailable as exc:
        log.warning("could not prune old CMIs for job %s: %s", job_id, exc)


def _notify_ckpt(state: TaskState, env: NodeEnv, scheduler: SchedulerAPI | None) -> None:
    if scheduler is None:
        raise SchedulerUnreachable("no scheduler configured")
    mkey = manifest_key(state.job_id)
    try:
        _scheduler_call(env, lambda: scheduler.publish_job(
            state.job_id, "ckpt", [mkey], state.ckpt_sequence, env.node.node_id))
    except StaleSequence as exc:
        # a newer checkpoint is already registered; ours stays in the store untouched
        env.emit("publish_stale", state, seq=state.ckpt_sequence, message=str(exc))
        return
    env.emit("ckpt_published", state, seq=state.ckpt_sequence)


# ------------------------------------------------------------------ hop / publish


def _resolve_dest(dest: Union[str, NodeDescriptor], env: NodeEnv) -> NodeDescriptor:
    node_id = dest.node_id if isinstance(dest, NodeDescriptor) else dest
    if node_id == env.node.node_id:
        return env.node
    found = env.resolve(node_id)
    if found is None:
        raise NodeUnreachable(f"node {node_id!r} is not in the cluster")
    return found


def hop(state: TaskState, dest: Union[str, NodeDescriptor], env: NodeEnv) -> None:
    """Migrate the running task to ``dest``; never returns on success.

    Raises NodeUnreachable (unknown node: before any upload; dead node: after
    the checkpoint is promoted, so the job stays recoverable) or HopRejected
    when the destination refuses the handoff.
    """
    target = _resolve_dest(dest, env)
    manifest = checkpoint(state, env, reason="hop")
    _notify_ckpt(state, env, env.scheduler)
    req = HopRequest(state.job_id, manifest_key(state.job_id), env.node.node_id)
    env.emit("hop_request", state, dest=target.node_id, seq=manifest.sequence, stage=manifest.stage)
    try:
        env.send_hop(target, req)
    except NodeUnreachable as exc:
        env.emit("hop_failed", state, dest=target.node_id, seq=manifest.sequence, reason=exc.code)
        raise
    except NavhopError as exc:
        env.emit("hop_failed", state, dest=target.node_id, seq=manifest.sequence, reason=exc.code)
        raise HopRejected(exc.code, str(exc)) from exc
    env.emit("hop_done", state, dest=target.node_id, seq=manifest.sequence, stage=manifest.stage)
    raise _Migrated(target, manifest.sequence)


def publish(state: TaskState, dest: SchedulerAPI | None, status: str, env: NodeEnv) -> None:
    """Publish a checkpoint ("ckpt", execution continues) or the final product ("finished").

    For "finished", ``state.vars["product_key"]`` names the product blob; if
    ``state.vars["product"]`` holds bytes they are uploaded there first.
    """
    if status not in PUBLISH_STATUSES:
        raise InvalidStatus(f"status must be one of {PUBLISH_STATUSES}, got {status!r}")
    scheduler = dest if dest is not None else env.scheduler
    if status == "ckpt":
        checkpoint(state, env, reason="publish")
        _notify_ckpt(state, env, scheduler)
        return

    key = state.vars.get("product_key")
    if not isinstance(key, str):
        raise MissingField("product_key")
    content = state.vars.get("product")
    if content is not None:
        _store_call(env, lambda: env.store.put_atomic(key, content))
        env.emit("product_uploaded", state, key=key, bytes=len(content), digest=sha256_hex(bytes(content)))
    if scheduler is None:
        raise SchedulerUnreachable("no scheduler configured")
    _scheduler_call(env, lambda: scheduler.publish_job(
        state.job_id, "finished", [key], state.ckpt_sequence, env.node.node_id))
    env.emit("finished_published", state, key=key)


# ------------------------------------------------------------------ run / restart


_run_ids = itertools.count(1)


def run_task(machine: StageMachine, state: TaskState, env: NodeEnv, entry: str = "run",
             **info: Any) -> TaskOutcome:
    """Execute stages from ``state.next_stage`` until completion, migration or failure.

    Emits an ``entry`` event (start / restart / resume) tagged with a fresh run id.
    """
    outer = getattr(run_context, "run", None)
    run_context.run = f"{env.node.node_id}/{os.getpid()}/{next(_run_ids)}"
    try:
        env.emit(entry, state, seq=state.ckpt_sequence, stage=state.next_stage, **info)
        return _run_stages(machine, state, env)
    finally:
        run_context.run = outer


def _run_stages(machine: StageMachine, state: TaskState, env: NodeEnv) -> TaskOutcome:
    if state.app_name != machine.app_name:
        raise UnknownApp(f"state belongs to {state.app_name!r}, machine is {machine.app_name!r}")
    if not 0 <= state.next_stage <= len(machine):
        raise ValueError(f"next_stage {state.next_stage} outside 0..{len(machine)}")
    while state.next_stage < len(machine):
        k = state.next_stage
        stage = machine[k]
        env.emit("stage_start", state, stage=k, label=stage.label, seq=state.ckpt_sequence)
        state.next_stage = k + 1
        try:
            result = stage.step(state, env)
        except _Migrated as m:
            return Migrated(m.dest, m.sequence)
        except Exception as exc:
            state.next_stage = k
            err = StageFailure(k, exc)
            env.emit("stage_failed", state, stage=k, error=type(exc).__name__, message=str(exc))
            return Failed(err, k)
        if result is not None:
            result.next_stage = k + 1
            state = result
        env.emit("stage_end", state, stage=k)
    env.emit("task_completed", state, seq=state.ckpt_sequence)
    return Completed(state)


@dataclass
class LoadedCheckpoint:
    manifest: RestartManifest
    state: TaskState
    digest: str  # SHA-256 of the whole CMI blob


def load_checkpoint(job_id: str, env: NodeEnv, mkey: str | None = None) -> LoadedCheckpoint:
    """Fetch and fully validate the job's promoted checkpoint.

    Reads the manifest first, then the CMI it references; checks the digest,
    manifest/CMI agreement, the app registration and the stage range.
    """
    mkey = mkey or manifest_key(job_id)
    try:
        raw_manifest = _store_call(env, lambda: env.store.get(mkey))
    except NotFound:
        raise NoCheckpoint(f"job {job_id} has no promoted checkpoint") from None
    manifest = decode_manifest(raw_manifest)
    if manifest.job_id != job_id:
        raise ManifestMismatch(f"manifest at {mkey} is for job {manifest.job_id!r}")
    machine = env.registry.get(manifest.app_name)
    try:
        raw = _store_call(env, lambda: env.store.get(manifest.cmi_blob_key))
    except NotFound:
        raise NoCheckpoint(f"manifest references missing CMI {manifest.cmi_blob_key}") from None
    try:
        image = decode_cmi(raw)
    except NavhopError as exc:
        env.events.emit("restart_rejected", job=job_id, reason=exc.code, key=manifest.cmi_blob_key)
        raise
    manifest.check_against(image)
    if image.stage > len(machine):
        raise ManifestMismatch(f"stage {image.stage} out of range for {manifest.app_name}")
    state = _state_from_image(image, manifest)
    return LoadedCheckpoint(manifest, state, sha256_hex(raw))


def _state_from_image(image: CheckpointImage, manifest: RestartManifest) -> TaskState:
    try:
        state = deserialize_state(image.payload)
    except StateDecodeError as exc:
        raise DigestMismatch(f"CMI payload does not decode: {exc}") from None
    if (state.job_id, state.app_name, state.next_stage, state.ckpt_sequence) != (
        image.job_id, manifest.app_name, image.stage, image.sequence
    ):
        raise ManifestMismatch("serialized state disagrees with the CMI header")
    return state


def resume(ckpt: LoadedCheckpoint, env: NodeEnv, via: str = "restart") -> TaskOutcome:
    m = ckpt.manifest
    machine = env.registry.get(m.app_name)
    return run_task(machine, ckpt.state, env, entry=via, cmi=m.cmi_blob_key, digest=ckpt.digest)


def restart(job_id: str, env: NodeEnv) -> TaskOutcome:
    return resume(load_checkpoint(job_id, env), env)


def start_fresh(job_id: str, app_name: str, env: NodeEnv) -> TaskOutcome:
    machine = env.registry.get(app_name)
    return run_task(machine, TaskState(job_id=job_id, app_name=app_name), env, entry="start")
