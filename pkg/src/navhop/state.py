"""Resumable task state and its canonical binary serialization.

Variable values are restricted to a closed set so that a state captured on
one node decodes to a bit-identical state on another:

    int (signed 64-bit), float, str, bytes, numpy float64 / int64 arrays
    of any shape, and nested dicts with str keys.

Maps are written with keys in sorted order and the decoder rejects anything
non-canonical, so ``serialize(deserialize(b)) == b`` for every ``b`` this
module emits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import StateDecodeError

STATE_MAGIC = b"NTS\x01"

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")

_INT_MIN, _INT_MAX = -(2**63), 2**63 - 1


@dataclass(eq=False)
class TaskState:
    job_id: str
    app_name: str
    next_stage: int = 0
    vars: dict[str, Any] = field(default_factory=dict)
    ckpt_sequence: int = 0

    def serialize(self) -> bytes:
        return serialize_state(self)

    def copy(self) -> "TaskState":
        return deserialize_state(serialize_state(self))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskState):
            return NotImplemented
        return serialize_state(self) == serialize_state(other)

    def __repr__(self) -> str:
        return (
            f"TaskState(job_id={self.job_id!r}, app_name={self.app_name!r}, "
            f"next_stage={self.next_stage}, ckpt_sequence={self.ckpt_sequence}, "
            f"vars={sorted(self.vars)})"
        )


def _put_str(out: list[bytes], s: str) -> None:
    raw = s.encode("utf-8")
    out.append(_U32.pack(len(raw)))
    out.append(raw)


def _put_value(out: list[bytes], value: Any, path: str) -> None:
    if isinstance(value, (bool, np.bool_)):
        raise TypeError(f"{path}: bool is not a supported state value")
    if isinstance(value, (int, np.integer)):
        value = int(value)
        if not _INT_MIN <= value <= _INT_MAX:
            raise OverflowError(f"{path}: integer {value} exceeds 64 bits")
        out.append(b"I" + _I64.pack(value))
    elif isinstance(value, float):
        out.append(b"F" + _F64.pack(value))
    elif isinstance(value, str):
        out.append(b"S")
        _put_str(out, value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out.append(b"B" + _U64.pack(len(raw)))
        out.append(raw)
    elif isinstance(value, np.ndarray):
        # exact dtypes only: widening float32 would not survive a round trip bit-for-bit
        if value.dtype == np.float64:
            tag, dtype = b"A", "<f8"
        elif value.dtype == np.int64:
            tag, dtype = b"N", "<i8"
        else:
            raise TypeError(f"{path}: unsupported array dtype {value.dtype} (float64 or int64 only)")
        arr = np.asarray(value, dtype=dtype, order="C")  # keeps 0-d arrays 0-d
        out.append(tag + _U8.pack(arr.ndim))
        out.extend(_U64.pack(n) for n in arr.shape)
        out.append(arr.tobytes())
    elif isinstance(value, dict):
        out.append(b"M")
        _put_map(out, value, path)
    else:
        raise TypeError(f"{path}: unsupported state value type {type(value).__name__}")


def _put_map(out: list[bytes], mapping: dict, path: str) -> None:
    for key in mapping:
        if not isinstance(key, str):
            raise TypeError(f"{path}: map keys must be str, got {key!r}")
    out.append(_U32.pack(len(mapping)))
    for key in sorted(mapping):
        _put_str(out, key)
        _put_value(out, mapping[key], f"{path}.{key}")


def encode_vars(mapping: dict[str, Any]) -> bytes:
    out: list[bytes] = []
    _put_map(out, mapping, "vars")
    return b"".join(out)


def serialize_state(state: TaskState) -> bytes:
    if state.next_stage < 0 or state.ckpt_sequence < 0:
        raise ValueError("next_stage and ckpt_sequence must be non-negative")
    out: list[bytes] = [STATE_MAGIC]
    _put_str(out, state.job_id)
    _put_str(out, state.app_name)
    out.append(_U32.pack(state.next_stage))
    out.append(_U64.pack(state.ckpt_sequence))
    _put_map(out, state.vars, "vars")
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.data):
            raise StateDecodeError("state payload truncated")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))[0]

    def string(self) -> str:
        n = self.unpack(_U32)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StateDecodeError(f"invalid UTF-8 in state: {exc}") from None

    def value(self) -> Any:
        tag = self.take(1)
        if tag == b"I":
            return self.unpack(_I64)
        if tag == b"F":
            return self.unpack(_F64)
        if tag == b"S":
            return self.string()
        if tag == b"B":
            return self.take(self.unpack(_U64))
        if tag in (b"A", b"N"):
            ndim = self.unpack(_U8)
            shape = tuple(self.unpack(_U64) for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            dtype = "<f8" if tag == b"A" else "<i8"
            raw = self.take(count * 8)
            return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:], copy=True)
        if tag == b"M":
            return self.mapping()
        raise StateDecodeError(f"unknown value tag {tag!r}")

    def mapping(self) -> dict[str, Any]:
        count = self.unpack(_U32)
        result: dict[str, Any] = {}
        prev = None
        for _ in range(count):
            key = self.string()
            if prev is not None and key <= prev:
                raise StateDecodeError(f"map keys not in canonical order at {key!r}")
            result[key] = self.value()
            prev = key
        return result


def decode_vars(data: bytes) -> dict[str, Any]:
    r = _Reader(bytes(data))
    result = r.mapping()
    if r.pos != len(r.data):
        raise StateDecodeError("trailing bytes after vars map")
    return result


def deserialize_state(data: bytes) -> TaskState:
    r = _Reader(bytes(data))
    if r.take(4) != STATE_MAGIC:
        raise StateDecodeError("payload is not a serialized TaskState")
    job_id = r.string()
    app_name = r.string()
    next_stage = r.unpack(_U32)
    ckpt_sequence = r.unpack(_U64)
    vars_ = r.mapping()
    if r.pos != len(r.data):
        raise StateDecodeError("trailing bytes after TaskState")
    return TaskState(job_id, app_name, next_stage, vars_, ckpt_sequence)
