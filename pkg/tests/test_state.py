import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from navhop.errors import StateDecodeError
from navhop.state import TaskState, decode_vars, deserialize_state, encode_vars, serialize_state

keys = st.text(max_size=12)
scalars = st.one_of(
    st.integers(-(2**63), 2**63 - 1),
    st.floats(allow_nan=True),
    st.text(max_size=30),
    st.binary(max_size=30),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    hnp.arrays(np.int64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5)),
)
values = st.recursive(scalars, lambda inner: st.dictionaries(keys, inner, max_size=4), max_leaves=12)


def same(a, b):
    if isinstance(a, dict):
        return isinstance(b, dict) and sorted(a) == sorted(b) and all(same(a[k], b[k]) for k in a)
    if isinstance(a, np.ndarray):
        return isinstance(b, np.ndarray) and a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    if isinstance(a, float):
        return isinstance(b, float) and (math.isnan(a) and math.isnan(b) or a == b and math.copysign(1, a) == math.copysign(1, b))
    return type(a) is type(b) and a == b


@given(st.dictionaries(keys, values, max_size=6), st.integers(0, 50), st.integers(0, 1000))
def test_roundtrip_and_canonical_bytes(vars, next_stage, seq):
    state = TaskState("job-x", "app", next_stage, vars, seq)
    blob = serialize_state(state)
    back = deserialize_state(blob)
    assert same(back.vars, vars)
    assert (back.job_id, back.app_name, back.next_stage, back.ckpt_sequence) == ("job-x", "app", next_stage, seq)
    assert serialize_state(back) == blob


def test_insertion_order_does_not_matter():
    a = TaskState("1", "app", vars={"b": 1, "a": {"y": 2.0, "x": "s"}})
    b = TaskState("1", "app", vars={"a": {"x": "s", "y": 2.0}, "b": 1})
    assert serialize_state(a) == serialize_state(b)
    assert a == b


def test_copy_is_deep():
    arr = np.arange(4, dtype=np.float64)
    s = TaskState("1", "app", vars={"arr": arr})
    c = s.copy()
    arr[0] = 99.0
    assert c.vars["arr"][0] == 0.0


@pytest.mark.parametrize("bad", [True, None, [1, 2], (1,), 2**70, np.arange(3, dtype=np.float32), {1: 2}])
def test_unsupported_values_rejected(bad):
    with pytest.raises((TypeError, OverflowError)):
        encode_vars({"v": bad})


def test_unsorted_map_rejected_on_decode():
    good = encode_vars({"a": 1, "b": 2})
    i, j = good.index(b"a"), good.index(b"b")
    swapped = bytearray(good)
    swapped[i], swapped[j] = swapped[j], swapped[i]
    with pytest.raises(StateDecodeError):
        decode_vars(bytes(swapped))


def test_trailing_and_truncated_rejected():
    blob = serialize_state(TaskState("1", "app", 2, {"k": "v"}, 1))
    with pytest.raises(StateDecodeError):
        deserialize_state(blob + b"\x00")
    for n in range(len(blob)):
        with pytest.raises(StateDecodeError):
            deserialize_state(blob[:n])
