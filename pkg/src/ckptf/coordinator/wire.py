"""Control-plane framing.

A frame is a 4-byte little-endian payload length, a 1-byte message type
and the payload. Every payload starts with a 32-bit ``sender`` field: the
originating rank or sub-coordinator on the way up, the addressed rank on
the way down. The remaining fields depend on the type (see ``SCHEMA``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from enum import IntEnum

HEADER = struct.Struct("<IB")
MAX_FRAME = 64 << 20

SUB_ID_FLAG = 0x8000_0000  # sender ids at or above this name sub-coordinators


class MsgType(IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    BARRIER_ENTER = 3
    BARRIER_RELEASE = 4
    PUBLISH = 5
    QUERY = 6
    QUERY_REPLY = 7
    CKPT_REQUEST = 8
    PHASE_ACK = 9
    AGGREGATE = 10
    SHUTDOWN = 11


class Role(IntEnum):
    RANK = 0
    SUB = 1


@dataclass(frozen=True)
class ControlMessage:
    type: MsgType
    sender: int = 0
    role: int = 0
    node: int = 0
    name: str = ""
    seq: int = 0
    status: int = 0
    key: str = ""
    value: bytes = b""
    generation: int = 0
    ckpt_id: int = 0
    phase: int = 0
    request_id: int = 0
    reason: str = ""
    inner: tuple["ControlMessage", ...] = field(default=())

    def encode(self) -> bytes:
        return encode(self)


_U8, _U32 = struct.Struct("<B"), struct.Struct("<I")

SCHEMA: dict[MsgType, tuple[tuple[str, str], ...]] = {
    MsgType.REGISTER: (("role", "u8"), ("node", "u32")),
    MsgType.REGISTER_ACK: (("status", "u8"), ("reason", "str")),
    MsgType.BARRIER_ENTER: (("name", "str"), ("seq", "u32")),
    MsgType.BARRIER_RELEASE: (("name", "str"), ("seq", "u32"), ("status", "u8")),
    MsgType.PUBLISH: (("key", "str"), ("value", "bytes"), ("generation", "u32")),
    MsgType.QUERY: (("request_id", "u32"), ("key", "str")),
    MsgType.QUERY_REPLY: (("request_id", "u32"), ("status", "u8"), ("value", "bytes"),
                          ("generation", "u32")),
    MsgType.CKPT_REQUEST: (("ckpt_id", "u32"),),
    MsgType.PHASE_ACK: (("ckpt_id", "u32"), ("phase", "u8")),
    MsgType.AGGREGATE: (("inner", "frames"),),
    MsgType.SHUTDOWN: (),
}


class WireError(ValueError):
    pass


def _put(out: bytearray, codec: str, value) -> None:
    if codec == "u8":
        out += _U8.pack(value)
    elif codec == "u32":
        out += _U32.pack(value)
    elif codec == "str":
        raw = value.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WireError("string field too long")
        out += struct.pack("<H", len(raw)) + raw
    elif codec == "bytes":
        out += _U32.pack(len(value)) + value
    elif codec == "frames":
        out += _U32.pack(len(value))
        for m in value:
            out += encode(m)


def encode(msg: ControlMessage) -> bytes:
    body = bytearray(_U32.pack(msg.sender))
    for name, codec in SCHEMA[MsgType(msg.type)]:
        _put(body, codec, getattr(msg, name))
    if len(body) > MAX_FRAME:
        raise WireError("frame too large")
    return HEADER.pack(len(body), int(msg.type)) + bytes(body)


def _decode_body(mtype: MsgType, body: memoryview) -> ControlMessage:
    if len(body) < 4:
        raise WireError("truncated payload")
    values = {"sender": _U32.unpack_from(body, 0)[0]}
    pos = 4
    try:
        for name, codec in SCHEMA[mtype]:
            if codec == "u8":
                values[name] = body[pos]
                pos += 1
            elif codec == "u32":
                values[name] = _U32.unpack_from(body, pos)[0]
                pos += 4
            elif codec == "str":
                (n,) = struct.unpack_from("<H", body, pos)
                pos += 2
                if pos + n > len(body):
                    raise WireError("truncated string")
                values[name] = bytes(body[pos:pos + n]).decode("utf-8")
                pos += n
            elif codec == "bytes":
                (n,) = _U32.unpack_from(body, pos)
                pos += 4
                if pos + n > len(body):
                    raise WireError("truncated bytes")
                values[name] = bytes(body[pos:pos + n])
                pos += n
            elif codec == "frames":
                (count,) = _U32.unpack_from(body, pos)
                pos += 4
                inner = []
                for _ in range(count):
                    msg, used = decode_frame(body[pos:])
                    if msg is None:
                        raise WireError("truncated inner frame")
                    inner.append(msg)
                    pos += used
                values[name] = tuple(inner)
    except (struct.error, IndexError) as exc:
        raise WireError(f"truncated {mtype.name} payload") from exc
    if pos != len(body):
        raise WireError(f"{len(body) - pos} trailing bytes in {mtype.name} payload")
    return ControlMessage(type=mtype, **values)


def decode_frame(buf) -> tuple[ControlMessage | None, int]:
    """Decode one frame from the front of ``buf``.

    Returns ``(message, bytes_used)``, or ``(None, 0)`` if the buffer does
    not yet hold a complete frame.
    """
    view = memoryview(buf)
    if len(view) < HEADER.size:
        return None, 0
    length, code = HEADER.unpack_from(view, 0)
    if length > MAX_FRAME:
        raise WireError(f"frame length {length} exceeds limit")
    end = HEADER.size + length
    if len(view) < end:
        return None, 0
    try:
        mtype = MsgType(code)
    except ValueError as exc:
        raise WireError(f"unknown message type {code}") from exc
    return _decode_body(mtype, view[HEADER.size:end]), end


def decode(frame: bytes) -> ControlMessage:
    msg, used = decode_frame(frame)
    if msg is None or used != len(frame):
        raise WireError("expected exactly one complete frame")
    return msg


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[ControlMessage]:
        self._buf += data
        out = []
        while True:
            msg, used = decode_frame(self._buf)
            if msg is None:
                return out
            del self._buf[:used]
            out.append(msg)


def aggregate(sender: int, messages) -> ControlMessage:
    return ControlMessage(MsgType.AGGREGATE, sender=sender, inner=tuple(messages))


def relevant_fields(mtype: MsgType) -> set[str]:
    return {"type", "sender"} | {name for name, _ in SCHEMA[mtype]}


def normalized(msg: ControlMessage) -> ControlMessage:
    """Reset fields the message type does not carry, so equality is wire equality."""
    keep = relevant_fields(msg.type)
    defaults = {f.name: f.default for f in fields(ControlMessage) if f.name not in keep}
    inner = tuple(normalized(m) for m in msg.inner) if "inner" in keep else ()
    return ControlMessage(**{**msg.__dict__, **defaults, "inner": inner})
