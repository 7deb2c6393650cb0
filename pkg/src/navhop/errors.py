"""Exception hierarchy shared by every navhop component.

Each error carries a short ``code`` so it can cross the wire protocol and be
re-raised as the same class on the calling side.
"""

from __future__ import annotations


class NavhopError(Exception):
    code = "Error"


# checkpoint image / manifest
class BadMagic(NavhopError):
    code = "BadMagic"


class DigestMismatch(NavhopError):
    code = "DigestMismatch"


class MalformedImage(DigestMismatch):
    """Digest checks out but the header is internally inconsistent."""

    code = "MalformedImage"


class VersionUnsupported(NavhopError):
    code = "VersionUnsupported"


class MissingField(NavhopError):
    code = "MissingField"


class MalformedManifest(NavhopError):
    code = "MalformedManifest"


class ManifestMismatch(NavhopError):
    """Manifest and the CMI it references disagree on job, stage or sequence."""

    code = "ManifestMismatch"


class StateDecodeError(NavhopError):
    code = "StateDecodeError"


# blob store
class StoreUnavailable(NavhopError):
    code = "StoreUnavailable"


class KeyInvalid(NavhopError):
    code = "KeyInvalid"


class NotFound(NavhopError):
    code = "NotFound"


# runtime
class StageFailure(NavhopError):
    code = "StageFailure"

    def __init__(self, stage: int, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause!r}")


class InvalidStatus(NavhopError):
    code = "InvalidStatus"


class NodeUnreachable(NavhopError):
    code = "NodeUnreachable"


class HopRejected(NavhopError):
    """The destination answered the hop request with an error; the source keeps the task."""

    code = "HopRejected"

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {message}" if message else reason)


class SchedulerUnreachable(NavhopError):
    code = "SchedulerUnreachable"


class NoCheckpoint(NavhopError):
    code = "NoCheckpoint"


class UnknownApp(NavhopError):
    code = "UnknownApp"


# node agent
class Busy(NavhopError):
    code = "Busy"


class Draining(NavhopError):
    code = "Draining"


# scheduler
class InvalidTransition(NavhopError):
    code = "InvalidTransition"


class StaleSequence(NavhopError):
    code = "StaleSequence"


class MissingBlob(NavhopError):
    code = "MissingBlob"


class ClaimConflict(NavhopError):
    code = "ClaimConflict"


# wire
class ProtocolError(NavhopError):
    code = "ProtocolError"


class RemoteError(NavhopError):
    """An error code received over the wire that has no local class."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}")


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


ERRORS_BY_CODE: dict[str, type[NavhopError]] = {
    c.code: c for c in _all_subclasses(NavhopError) if c not in (RemoteError, StageFailure, HopRejected)
}


def from_wire(code: str, message: str) -> NavhopError:
    cls = ERRORS_BY_CODE.get(code)
    if cls is None:
        return RemoteError(code, message)
    return cls(message)
