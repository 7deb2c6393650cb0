"""Shared blob storage standing in for an S3 bucket or a bound volume.

Two backends share one interface.  ``LocalStore`` keeps each blob as a file
under ``root/<namespace>/<name>`` and replaces it by writing a temp file in the
same directory, syncing it, and renaming it over the target, so a reader sees
either the old or the new content.  ``MemoryStore`` is for unit tests.

Both accept an optional ``hook(point, key)`` callable invoked at instrumented
points of the write path; the preemption harness uses it to kill a node at an
exact spot inside ``put_atomic``.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

from .errors import KeyInvalid, NotFound, StoreUnavailable

MAX_KEY_LENGTH = 512
_KEY_CHARS = re.compile(r"^[A-Za-z0-9._\-/]+$")
TMP_PREFIX = ".tmp-"

# Points at which put_atomic calls the hook, in order.
PUT_POINTS = ("begin", "tmp_open", "partial", "written", "synced", "renamed", "done")

Hook = Callable[[str, str], None]


@dataclass(frozen=True, order=True)
class BlobKey:
    namespace: str
    name: str

    def __post_init__(self):
        full = f"{self.namespace}/{self.name}"
        if len(full) > MAX_KEY_LENGTH:
            raise KeyInvalid(f"key longer than {MAX_KEY_LENGTH}: {full[:40]}...")
        if not self.namespace or "/" in self.namespace:
            raise KeyInvalid(f"bad namespace {self.namespace!r}")
        if not _KEY_CHARS.match(full):
            raise KeyInvalid(f"illegal characters in key {full!r}")
        for seg in full.split("/"):
            # leading dots are reserved for in-flight temp files
            if not seg or seg.startswith("."):
                raise KeyInvalid(f"bad path segment {seg!r} in key {full!r}")

    def __str__(self) -> str:
        return f"{self.namespace}/{self.name}"

    @classmethod
    def parse(cls, key: Union[str, "BlobKey"]) -> "BlobKey":
        if isinstance(key, BlobKey):
            return key
        if not isinstance(key, str):
            raise KeyInvalid(f"key must be a string, got {type(key).__name__}")
        namespace, sep, name = key.partition("/")
        if not sep:
            raise KeyInvalid(f"key {key!r} has no namespace/name separator")
        return cls(namespace, name)


KeyLike = Union[str, BlobKey]


@dataclass(frozen=True)
class BlobMeta:
    key: BlobKey
    length: int
    digest: str  # hex SHA-256
    modified_at: float


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class BlobStore:
    """Common surface; subclasses implement the storage primitives."""

    def __init__(self, hook: Hook | None = None):
        self.hook = hook

    def _fire(self, point: str, key: BlobKey) -> None:
        if self.hook is not None:
            self.hook(point, str(key))

    def put_atomic(self, key: KeyLike, content: bytes) -> BlobMeta:
        raise NotImplementedError

    def get(self, key: KeyLike) -> bytes:
        raise NotImplementedError

    def exists(self, key: KeyLike) -> bool:
        raise NotImplementedError

    def list(self, namespace: str) -> list[BlobMeta]:
        raise NotImplementedError

    def delete(self, key: KeyLike) -> None:
        raise NotImplementedError


class MemoryStore(BlobStore):
    def __init__(self, hook: Hook | None = None):
        super().__init__(hook)
        self._blobs: dict[BlobKey, tuple[bytes, float]] = {}
        self._lock = threading.Lock()
        self.available = True

    def _check(self) -> None:
        if not self.available:
            raise StoreUnavailable("memory store marked unavailable")

    def put_atomic(self, key: KeyLike, content: bytes) -> BlobMeta:
        k = BlobKey.parse(key)
        self._check()
        self._fire("begin", k)
        content = bytes(content)
        now = time.time()
        with self._lock:
            self._blobs[k] = (content, now)
        self._fire("done", k)
        return BlobMeta(k, len(content), sha256_hex(content), now)

    def get(self, key: KeyLike) -> bytes:
        k = BlobKey.parse(key)
        self._check()
        with self._lock:
            try:
                return self._blobs[k][0]
            except KeyError:
                raise NotFound(str(k)) from None

    def exists(self, key: KeyLike) -> bool:
        k = BlobKey.parse(key)
        self._check()
        with self._lock:
            return k in self._blobs

    def list(self, namespace: str) -> list[BlobMeta]:
        self._check()
        with self._lock:
            items = [(k, v) for k, v in self._blobs.items() if k.namespace == namespace]
        items.sort(key=lambda kv: kv[0].name)
        return [BlobMeta(k, len(c), sha256_hex(c), t) for k, (c, t) in items]

    def delete(self, key: KeyLike) -> None:
        k = BlobKey.parse(key)
        self._check()
        with self._lock:
            if self._blobs.pop(k, None) is None:
                raise NotFound(str(k))


class LocalStore(BlobStore):
    def __init__(self, root: str | os.PathLike, hook: Hook | None = None, fsync: bool = True):
        super().__init__(hook)
        self.root = Path(root)
        self.fsync = fsync
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreUnavailable(f"cannot create store root {self.root}: {exc}") from None

    def path(self, key: KeyLike) -> Path:
        k = BlobKey.parse(key)
        return self.root.joinpath(k.namespace, *k.name.split("/"))

    def put_atomic(self, key: KeyLike, content: bytes) -> BlobMeta:
        k = BlobKey.parse(key)
        content = bytes(content)
        target = self.path(k)
        self._fire("begin", k)
        tmp = target.with_name(f"{TMP_PREFIX}{target.name}-{uuid.uuid4().hex}")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
            try:
                self._fire("tmp_open", k)
                half = len(content) // 2
                _write_all(fd, content[:half])
                self._fire("partial", k)
                _write_all(fd, content[half:])
                self._fire("written", k)
                if self.fsync:
                    os.fsync(fd)
            finally:
                os.close(fd)
            self._fire("synced", k)
            os.replace(tmp, target)
        except Exception as exc:
            # a hard kill never reaches this handler; ordinary failures clean up
            try:
                os.unlink(tmp)
            except OSError:
                pass
            if isinstance(exc, OSError):
                raise StoreUnavailable(f"put {k}: {exc}") from exc
            raise
        self._fire("renamed", k)
        if self.fsync:
            _fsync_dir(target.parent)
        self._fire("done", k)
        st = target.stat()
        return BlobMeta(k, len(content), sha256_hex(content), st.st_mtime)

    def get(self, key: KeyLike) -> bytes:
        k = BlobKey.parse(key)
        try:
            return self.path(k).read_bytes()
        except (FileNotFoundError, NotADirectoryError, IsADirectoryError):
            raise NotFound(str(k)) from None
        except OSError as exc:
            raise StoreUnavailable(f"get {k}: {exc}") from exc

    def exists(self, key: KeyLike) -> bool:
        return self.path(key).is_file()

    def list(self, namespace: str) -> list[BlobMeta]:
        base = self.root / namespace
        if not base.is_dir():
            return []
        metas = []
        try:
            for dirpath, dirnames, filenames in os.walk(base):
                dirnames[:] = [d for d in dirnames if not d.startswith(".")]
                for fn in filenames:
                    if fn.startswith("."):
                        continue
                    p = Path(dirpath, fn)
                    name = p.relative_to(base).as_posix()
                    data = p.read_bytes()
                    metas.append(
                        BlobMeta(BlobKey(namespace, name), len(data), sha256_hex(data), p.stat().st_mtime)
                    )
        except OSError as exc:
            raise StoreUnavailable(f"list {namespace}: {exc}") from exc
        metas.sort(key=lambda m: m.key.name)
        return metas

    def delete(self, key: KeyLike) -> None:
        k = BlobKey.parse(key)
        try:
            os.unlink(self.path(k))
        except FileNotFoundError:
            raise NotFound(str(k)) from None
        except OSError as exc:
            raise StoreUnavailable(f"delete {k}: {exc}") from exc


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        n = os.write(fd, view)
        view = view[n:]


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)
