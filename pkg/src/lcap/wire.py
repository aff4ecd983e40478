"""Framed broker <-> consumer protocol.

Every frame is an 8-byte little-endian header followed by the payload::

    magic u16 = 0x4C43 | version u8 = 1 | msg_type u8 | payload_len u32

=====  ==========  ==================================================
type   name        payload
=====  ==========  ==================================================
1      HELLO       role u8, window u32, mask u16, group_len u16, group
2      HELLO_ACK   consumer_id u64, mdt_count u32, (mdt_id u32, head u64)*
3      RECS        mdt_id u32, count u32, encoded records
4      ACK         mdt_id u32, count u32, index u64 * count
5      FIN         (empty)
6      STATS_REQ   (empty)
7      STATS       utf-8 text
8      ERROR       code u16, msg_len u16, msg
=====  ==========  ==================================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Union

from lcap.record import ChangelogRecord, CodecError, decode_record, encode_record

MAGIC = 0x4C43
VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_PORT = 5658

_HEADER = struct.Struct("<HBBI")
HEADER_SIZE = _HEADER.size
_HELLO = struct.Struct("<BIHH")
_HELLO_ACK = struct.Struct("<QI")
_HEAD = struct.Struct("<IQ")
_BATCH = struct.Struct("<II")
_ERROR = struct.Struct("<HH")
_U32 = struct.Struct("<I")


class MsgType(IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    RECS = 3
    ACK = 4
    FIN = 5
    STATS_REQ = 6
    STATS = 7
    ERROR = 8


class ErrorCode(IntEnum):
    PROTOCOL = 1
    BAD_MASK = 2
    UNKNOWN_TYPE = 3
    BAD_ACK = 4
    SLOW_CONSUMER = 5
    SHUTDOWN = 6


class Role(IntEnum):
    PERSISTENT = 1
    EPHEMERAL = 2


class FrameError(ValueError):
    """Undecodable frame. ``code`` is the ERROR code to answer with."""

    def __init__(self, message: str, code: ErrorCode = ErrorCode.PROTOCOL):
        super().__init__(message)
        self.code = code


@dataclass
class Hello:
    role: Role
    window: int
    mask: int
    group: str = ""
    type = MsgType.HELLO


@dataclass
class HelloAck:
    consumer_id: int
    heads: dict[int, int] = field(default_factory=dict)
    type = MsgType.HELLO_ACK


@dataclass
class Recs:
    mdt_id: int
    records: list[ChangelogRecord]
    type = MsgType.RECS


@dataclass
class Ack:
    mdt_id: int
    indices: list[int]
    type = MsgType.ACK


@dataclass
class Fin:
    type = MsgType.FIN


@dataclass
class StatsReq:
    type = MsgType.STATS_REQ


@dataclass
class Stats:
    text: str
    type = MsgType.STATS


@dataclass
class Error:
    code: int
    message: str = ""
    type = MsgType.ERROR


Message = Union[Hello, HelloAck, Recs, Ack, Fin, StatsReq, Stats, Error]


def encode_payload(m: Message) -> bytes:
    if isinstance(m, Hello):
        group = m.group.encode()
        return _HELLO.pack(int(m.role), m.window, m.mask, len(group)) + group
    if isinstance(m, HelloAck):
        return _HELLO_ACK.pack(m.consumer_id, len(m.heads)) + b"".join(
            _HEAD.pack(mdt, head) for mdt, head in m.heads.items())
    if isinstance(m, Recs):
        return _BATCH.pack(m.mdt_id, len(m.records)) + b"".join(
            encode_record(r) for r in m.records)
    if isinstance(m, Ack):
        return _BATCH.pack(m.mdt_id, len(m.indices)) + struct.pack(f"<{len(m.indices)}Q", *m.indices)
    if isinstance(m, (Fin, StatsReq)):
        return b""
    if isinstance(m, Stats):
        return m.text.encode()
    if isinstance(m, Error):
        msg = m.message.encode()[:0xFFFF]
        return _ERROR.pack(m.code, len(msg)) + msg
    raise TypeError(f"not a message: {m!r}")


def frame_encode(m: Message) -> bytes:
    payload = encode_payload(m)
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(MAGIC, VERSION, int(m.type), len(payload)) + payload


def parse_header(buf) -> tuple[int, int]:
    """Validate a frame header; return ``(msg_type, payload_len)``."""
    if len(buf) < HEADER_SIZE:
        raise FrameError("truncated frame header")
    magic, version, msg_type, length = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic:#06x}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return msg_type, length


def decode_payload(msg_type: int, payload: bytes) -> Message:
    try:
        return _decode_payload(msg_type, memoryview(payload))
    except (struct.error, CodecError, UnicodeDecodeError) as exc:
        raise FrameError(f"malformed {_type_name(msg_type)} payload: {exc}") from None


def _type_name(msg_type: int) -> str:
    try:
        return MsgType(msg_type).name
    except ValueError:
        return f"type {msg_type}"


def _expect_len(payload, n: int) -> None:
    if len(payload) != n:
        raise FrameError(f"payload is {len(payload)} bytes, expected {n}")


def _decode_payload(msg_type: int, p: memoryview) -> Message:
    if msg_type == MsgType.HELLO:
        role, window, mask, glen = _HELLO.unpack_from(p, 0)
        _expect_len(p, _HELLO.size + glen)
        try:
            role = Role(role)
        except ValueError:
            raise FrameError(f"unknown role {role}") from None
        return Hello(role, window, mask, bytes(p[_HELLO.size:]).decode())
    if msg_type == MsgType.HELLO_ACK:
        cid, count = _HELLO_ACK.unpack_from(p, 0)
        _expect_len(p, _HELLO_ACK.size + count * _HEAD.size)
        heads = dict(_HEAD.iter_unpack(p[_HELLO_ACK.size:]))
        return HelloAck(cid, heads)
    if msg_type == MsgType.RECS:
        mdt, count = _BATCH.unpack_from(p, 0)
        pos, records = _BATCH.size, []
        for _ in range(count):
            if pos + 4 > len(p):
                raise FrameError("RECS batch truncated")
            (reclen,) = _U32.unpack_from(p, pos)
            records.append(decode_record(p[pos:pos + reclen]))
            pos += reclen
        if pos != len(p):
            raise FrameError(f"{len(p) - pos} stray bytes after RECS batch")
        return Recs(mdt, records)
    if msg_type == MsgType.ACK:
        mdt, count = _BATCH.unpack_from(p, 0)
        _expect_len(p, _BATCH.size + 8 * count)
        return Ack(mdt, list(struct.unpack_from(f"<{count}Q", p, _BATCH.size)))
    if msg_type == MsgType.FIN:
        _expect_len(p, 0)
        return Fin()
    if msg_type == MsgType.STATS_REQ:
        _expect_len(p, 0)
        return StatsReq()
    if msg_type == MsgType.STATS:
        return Stats(bytes(p).decode())
    if msg_type == MsgType.ERROR:
        code, mlen = _ERROR.unpack_from(p, 0)
        _expect_len(p, _ERROR.size + mlen)
        return Error(code, bytes(p[_ERROR.size:]).decode(errors="replace"))
    raise FrameError(f"unknown message type {msg_type}", ErrorCode.UNKNOWN_TYPE)


def frame_decode(buf: bytes) -> Message:
    """Decode a buffer holding exactly one frame."""
    msg_type, length = parse_header(buf)
    if len(buf) < HEADER_SIZE + length:
        raise FrameError(f"frame truncated: {len(buf) - HEADER_SIZE} of {length} payload bytes")
    if len(buf) > HEADER_SIZE + length:
        raise FrameError(f"{len(buf) - HEADER_SIZE - length} bytes after frame")
    return decode_payload(msg_type, buf[HEADER_SIZE:])


class FrameReader:
    """Reassembles frames from an arbitrary chunking of a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[Message]:
        self._buf += data
        while len(self._buf) >= HEADER_SIZE:
            msg_type, length = parse_header(self._buf)
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                return
            payload = bytes(self._buf[HEADER_SIZE:end])
            del self._buf[:end]
            yield decode_payload(msg_type, payload)

    @property
    def pending(self) -> int:
        return len(self._buf)
