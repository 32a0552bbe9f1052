import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ckptf.coordinator.wire import (
    SCHEMA, SUB_ID_FLAG, ControlMessage, FrameReader, MsgType, WireError, aggregate, decode,
    decode_frame, encode, normalized,
)

u32 = st.integers(0, 2**32 - 1)
u8 = st.integers(0, 255)
text = st.text(max_size=40)

leaf_types = [t for t in MsgType if t is not MsgType.AGGREGATE]


@st.composite
def leaf(draw):
    t = draw(st.sampled_from(leaf_types))
    return ControlMessage(
        t, sender=draw(u32), role=draw(u8), node=draw(u32), name=draw(text), seq=draw(u32),
        status=draw(u8), key=draw(text), value=draw(st.binary(max_size=64)),
        generation=draw(u32), ckpt_id=draw(u32), phase=draw(u8), request_id=draw(u32),
        reason=draw(text))


messages = st.one_of(leaf(), st.builds(aggregate, u32, st.lists(leaf(), max_size=6)))


@given(messages)
def test_round_trip(msg):
    assert decode(encode(msg)) == normalized(msg)


@given(st.lists(messages, max_size=8), st.integers(1, 17))
def test_stream_reassembly_in_arbitrary_chunks(msgs, chunk):
    stream = b"".join(encode(m) for m in msgs)
    reader = FrameReader()
    out = []
    for i in range(0, len(stream), chunk):
        out += reader.feed(stream[i:i + chunk])
    assert out == [normalized(m) for m in msgs]


@given(messages)
def test_truncated_frame_is_incomplete(msg):
    frame = encode(msg)
    for cut in range(len(frame)):
        assert decode_frame(frame[:cut]) == (None, 0)


def test_header_layout():
    frame = encode(ControlMessage(MsgType.CKPT_REQUEST, sender=7, ckpt_id=3))
    length, mtype = struct.unpack_from("<IB", frame)
    assert length == len(frame) - 5 == 8
    assert mtype == MsgType.CKPT_REQUEST
    assert frame[5:] == struct.pack("<II", 7, 3)


def test_every_type_has_a_schema():
    assert set(SCHEMA) == set(MsgType)


def test_aggregate_nests_frames_and_sub_ids():
    inner = [ControlMessage(MsgType.BARRIER_ENTER, sender=r, name="b", seq=0) for r in range(3)]
    msg = decode(encode(aggregate(SUB_ID_FLAG | 5, inner)))
    assert msg.sender == 0x80000005
    assert [m.sender for m in msg.inner] == [0, 1, 2]


@pytest.mark.parametrize("frame", [
    struct.pack("<IB", 4, 99) + b"\0" * 4,                       # unknown type
    struct.pack("<IB", 2, MsgType.SHUTDOWN) + b"\0\0",            # short sender
    struct.pack("<IB", 6, MsgType.SHUTDOWN) + b"\0" * 6,          # trailing bytes
    struct.pack("<IB", 8, MsgType.QUERY) + struct.pack("<IIH", 0, 0, 9)[:8],  # cut string
    struct.pack("<IB", 0xFFFFFFFF, MsgType.SHUTDOWN),             # absurd length
])
def test_malformed_frames_raise(frame):
    with pytest.raises(WireError):
        decode(frame)


def test_decode_requires_exactly_one_frame():
    f = encode(ControlMessage(MsgType.SHUTDOWN, sender=1))
    with pytest.raises(WireError):
        decode(f + f)
