"""Checkpoint Memory Image (CMI) container and restart manifest.

A CMI is a little-endian binary record::

    magic            4 bytes   b"NCMI"
    format_version   u16
    job_id           u16 length + UTF-8 bytes
    sequence         u64       (>= 1)
    stage            u32       next stage to run on resume
    created_at       i64       UTC seconds since the epoch
    payload_length   u64
    payload          payload_length bytes (serialized TaskState)
    digest           32 bytes  SHA-256 over everything above

The manifest is the small text document a restarting node reads first; it
names the CMI blob and mirrors its stage and sequence.  See FORMAT.md.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass

from .errors import (
    BadMagic,
    DigestMismatch,
    MalformedImage,
    MalformedManifest,
    ManifestMismatch,
    MissingField,
    VersionUnsupported,
)

MAGIC = b"NCMI"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

_PREFIX = struct.Struct("<4sHH")  # magic, version, job_id length
_FIXED = struct.Struct("<QIqQ")  # sequence, stage, created_at, payload_length
MIN_SIZE = _PREFIX.size + _FIXED.size + DIGEST_SIZE

CMI_SUFFIX = ".cmi"
MANIFEST_SUFFIX = ".manifest"


@dataclass(frozen=True)
class CheckpointImage:
    job_id: str
    sequence: int
    stage: int
    created_at: int
    payload: bytes
    digest: bytes
    format_version: int = FORMAT_VERSION
    magic: bytes = MAGIC

    @property
    def payload_length(self) -> int:
        return len(self.payload)


def header_size(job_id: str) -> int:
    """Size of a CMI with an empty payload (header plus trailing digest)."""
    return MIN_SIZE + len(job_id.encode("utf-8"))


def encode_cmi(
    job_id: str,
    sequence: int,
    stage: int,
    payload: bytes,
    created_at: int | None = None,
) -> bytes:
    if sequence < 1:
        raise ValueError(f"sequence must be >= 1, got {sequence}")
    if stage < 0:
        raise ValueError(f"stage must be >= 0, got {stage}")
    jid = job_id.encode("utf-8")
    if not jid or len(jid) > 0xFFFF:
        raise ValueError("job_id must be 1..65535 UTF-8 bytes")
    if created_at is None:
        created_at = int(time.time())
    payload = bytes(payload)
    body = b"".join(
        (
            _PREFIX.pack(MAGIC, FORMAT_VERSION, len(jid)),
            jid,
            _FIXED.pack(sequence, stage, created_at, len(payload)),
            payload,
        )
    )
    return body + hashlib.sha256(body).digest()


def _near_magic(head: bytes) -> bool:
    # A header within one byte of the magic is a damaged CMI, not a foreign file.
    if len(head) < len(MAGIC):
        return MAGIC.startswith(head)
    return sum(a != b for a, b in zip(head, MAGIC)) <= 1


def decode_cmi(blob: bytes) -> CheckpointImage:
    blob = bytes(blob)
    if not _near_magic(blob[:4]):
        raise BadMagic(f"not a CMI (leading bytes {blob[:4]!r})")
    if len(blob) < MIN_SIZE:
        raise DigestMismatch(f"truncated CMI: {len(blob)} bytes")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestMismatch("CMI digest does not match content")

    magic, version, jlen = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"CMI format version {version}")
    off = _PREFIX.size
    if off + jlen + _FIXED.size > len(body):
        raise MalformedImage("job_id length runs past the header")
    try:
        job_id = body[off : off + jlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedImage(f"job_id is not UTF-8: {exc}") from None
    off += jlen
    sequence, stage, created_at, plen = _FIXED.unpack_from(body, off)
    off += _FIXED.size
    if off + plen != len(body):
        raise MalformedImage(f"payload_length {plen} disagrees with blob size")
    if sequence < 1:
        raise MalformedImage("sequence must be >= 1")
    return CheckpointImage(
        job_id=job_id,
        sequence=sequence,
        stage=stage,
        created_at=created_at,
        payload=body[off:],
        digest=digest,
        format_version=version,
        magic=magic,
    )


# ---------------------------------------------------------------- manifest

MANIFEST_HEADER = "NAVHOP-MANIFEST 1"
MANIFEST_FIELDS = ("job_id", "app_name", "cmi_blob_key", "stage", "sequence")
_INT_FIELDS = {"stage", "sequence"}


@dataclass(frozen=True)
class RestartManifest:
    job_id: str
    cmi_blob_key: str
    app_name: str
    stage: int
    sequence: int

    def check_against(self, image: CheckpointImage) -> None:
        """Raise ManifestMismatch unless the manifest mirrors ``image``'s header."""
        for name in ("job_id", "stage", "sequence"):
            mine, theirs = getattr(self, name), getattr(image, name)
            if mine != theirs:
                raise ManifestMismatch(f"manifest {name}={mine!r} but CMI has {theirs!r}")


def encode_manifest(m: RestartManifest) -> bytes:
    lines = [MANIFEST_HEADER]
    for name in MANIFEST_FIELDS:
        value = str(getattr(m, name))
        if not value or any(c in value for c in "\r\n"):
            raise MalformedManifest(f"field {name} must be a non-empty single line")
        lines.append(f"{name}={value}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_manifest(data: bytes) -> RestartManifest:
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedManifest(f"manifest is not UTF-8: {exc}") from None
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise MalformedManifest("missing manifest header line")
    fields: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedManifest(f"line {lineno}: expected key=value")
        if key not in MANIFEST_FIELDS:
            raise MalformedManifest(f"line {lineno}: unknown field {key!r}")
        if key in fields:
            raise MalformedManifest(f"line {lineno}: duplicate field {key!r}")
        fields[key] = value
    for name in MANIFEST_FIELDS:
        if not fields.get(name):
            raise MissingField(name)
    values: dict[str, object] = dict(fields)
    for name in _INT_FIELDS:
        raw = fields[name]
        if not raw.isdigit() or not raw.isascii():
            raise MalformedManifest(f"{name} must be a non-negative integer, got {raw!r}")
        values[name] = int(raw)
    if values["sequence"] < 1:
        raise MalformedManifest("sequence must be >= 1")
    return RestartManifest(**values)
