"""Changelog records and their binary encoding.

A record is a fixed 56-byte header followed by optional extensions, each
gated by one bit of ``ext_mask``, and a final variable-length name::

    reclen u32 | opcode u8 | ext_mask u16 | pad u8 | index u64 | time_ns u64
    | target Fid | parent Fid
    [JOBID 32 bytes]
    [RENAME_SOURCE: source Fid | source_parent Fid | sname_len u16 | sname]
    [UIDGID: uid u32 | gid u32]
    name_len u16 | name

All integers are little-endian; a Fid is ``seq u64 | oid u32 | ver u32``.
The mdt id is not part of the body: a journal holds a single MDT's records.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from enum import IntEnum, IntFlag
from typing import NamedTuple

__all__ = [
    "Fid",
    "ZERO_FID",
    "OpCode",
    "ExtMask",
    "RenameSource",
    "ChangelogRecord",
    "NAME",
    "CodecError",
    "EncodeError",
    "DecodeError",
    "HEADER_SIZE",
    "JOBID_SIZE",
    "MAX_NAME",
    "encode_record",
    "decode_record",
    "record_size",
    "field_offset",
    "remap_record",
]


class Fid(NamedTuple):
    seq: int
    oid: int
    ver: int = 0

    def __str__(self) -> str:
        return f"{self.seq:#x}:{self.oid:#x}:{self.ver:#x}"

    def __bool__(self) -> bool:
        return self != ZERO_FID


ZERO_FID = Fid(0, 0, 0)


class OpCode(IntEnum):
    MARK = 0
    CREAT = 1
    MKDIR = 2
    HLINK = 3
    SLINK = 4
    MKNOD = 5
    UNLINK = 6
    RMDIR = 7
    RENAME = 8
    SATTR = 9
    XATTR = 10
    CLOSE = 11


class ExtMask(IntFlag):
    NONE = 0
    JOBID = 1 << 0
    RENAME_SOURCE = 1 << 1
    UIDGID = 1 << 2


ALL_EXT = ExtMask.JOBID | ExtMask.RENAME_SOURCE | ExtMask.UIDGID
RESERVED_BITS = 0xFFFF & ~int(ALL_EXT)

# pseudo field id accepted by field_offset()
NAME = "name"

HEADER_SIZE = 56
JOBID_SIZE = 32
MAX_NAME = 255

_HEADER = struct.Struct("<IBHBQQQIIQII")
_FID = struct.Struct("<QII")
_U16 = struct.Struct("<H")
_UIDGID = struct.Struct("<II")

assert _HEADER.size == HEADER_SIZE


class RenameSource(NamedTuple):
    source: Fid
    source_parent: Fid
    name: bytes = b""


@dataclass(frozen=True)
class ChangelogRecord:
    """One metadata event.

    Optional extensions are ``None`` when absent; ``ext_mask`` is derived
    from which of them are set, so a record can never disagree with its
    own mask. ``jobid`` is held without its zero padding.
    """

    index: int
    opcode: OpCode
    time_ns: int = 0
    target: Fid = ZERO_FID
    parent: Fid = ZERO_FID
    name: bytes = b""
    jobid: bytes | None = None
    rename_source: RenameSource | None = None
    uid_gid: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.jobid is not None and self.jobid.endswith(b"\0"):
            object.__setattr__(self, "jobid", self.jobid.rstrip(b"\0"))

    @property
    def ext_mask(self) -> ExtMask:
        mask = 0
        if self.jobid is not None:
            mask |= 1
        if self.rename_source is not None:
            mask |= 2
        if self.uid_gid is not None:
            mask |= 4
        return ExtMask(mask)

    def replace(self, **changes) -> ChangelogRecord:
        return dataclasses.replace(self, **changes)


class CodecError(ValueError):
    """Base class for record encoding and decoding failures."""


class EncodeError(CodecError):
    pass


class DecodeError(CodecError):
    """A buffer is not a valid record; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _check_name(what: str, name: bytes) -> None:
    if len(name) > MAX_NAME:
        raise EncodeError(f"{what} is {len(name)} bytes, limit is {MAX_NAME}")
    if b"\0" in name or b"/" in name:
        raise EncodeError(f"{what} contains NUL or '/'")


def _check_mask(mask: int) -> None:
    if mask & RESERVED_BITS:
        raise EncodeError(f"reserved ext_mask bits set: {mask:#06x}")


def record_size(rec: ChangelogRecord) -> int:
    size = HEADER_SIZE + 2 + len(rec.name)
    if rec.jobid is not None:
        size += JOBID_SIZE
    if rec.rename_source is not None:
        size += 2 * _FID.size + 2 + len(rec.rename_source.name)
    if rec.uid_gid is not None:
        size += _UIDGID.size
    return size


def encode_record(rec: ChangelogRecord) -> bytes:
    if rec.index < 1:
        raise EncodeError(f"index must be positive, got {rec.index}")
    _check_name("name", rec.name)
    mask = rec.ext_mask
    parts = []
    if rec.jobid is not None:
        if len(rec.jobid) > JOBID_SIZE:
            raise EncodeError(f"jobid longer than {JOBID_SIZE} bytes")
        parts.append(rec.jobid.ljust(JOBID_SIZE, b"\0"))
    if rec.rename_source is not None:
        src = rec.rename_source
        _check_name("rename source name", src.name)
        parts.append(_FID.pack(*src.source) + _FID.pack(*src.source_parent)
                     + _U16.pack(len(src.name)) + src.name)
    if rec.uid_gid is not None:
        parts.append(_UIDGID.pack(*rec.uid_gid))
    parts.append(_U16.pack(len(rec.name)) + rec.name)
    tail = b"".join(parts)
    try:
        head = _HEADER.pack(HEADER_SIZE + len(tail), int(rec.opcode), mask, 0,
                            rec.index, rec.time_ns, *rec.target, *rec.parent)
    except struct.error as exc:
        raise EncodeError(str(exc)) from None
    return head + tail


def _read_name(buf, pos: int, end: int, field: str) -> tuple[bytes, int]:
    if pos + 2 > end:
        raise DecodeError(field, "truncated length")
    (n,) = _U16.unpack_from(buf, pos)
    pos += 2
    if n > MAX_NAME:
        raise DecodeError(field, f"length {n} exceeds {MAX_NAME}")
    if pos + n > end:
        raise DecodeError(field, f"length {n} overruns record")
    value = bytes(buf[pos:pos + n])
    if b"\0" in value or b"/" in value:
        raise DecodeError(field, "contains NUL or '/'")
    return value, pos + n


def decode_record(buf: bytes | bytearray | memoryview) -> ChangelogRecord:
    """Decode exactly one record; ``buf`` must hold nothing beyond ``reclen``."""
    size = len(buf)
    if size < HEADER_SIZE + 2:
        raise DecodeError("reclen", f"buffer of {size} bytes is shorter than a minimal record")
    (reclen, op, mask, _pad, index, time_ns, tseq, toid, tver,
     pseq, poid, pver) = _HEADER.unpack_from(buf, 0)
    if reclen > size:
        raise DecodeError("reclen", f"record claims {reclen} bytes, only {size} supplied")
    if reclen < size:
        raise DecodeError("reclen", f"{size - reclen} trailing bytes after record")
    if op > 11:
        raise DecodeError("opcode", f"unknown opcode {op}")
    if mask & RESERVED_BITS:
        raise DecodeError("ext_mask", f"reserved bits set: {mask:#06x}")
    if index < 1:
        raise DecodeError("index", "index must be positive")
    pos = HEADER_SIZE
    jobid = rename_source = uid_gid = None
    if mask & ExtMask.JOBID:
        if pos + JOBID_SIZE > reclen:
            raise DecodeError("jobid", "truncated extension")
        jobid = bytes(buf[pos:pos + JOBID_SIZE])
        pos += JOBID_SIZE
    if mask & ExtMask.RENAME_SOURCE:
        if pos + 2 * _FID.size > reclen:
            raise DecodeError("rename_source", "truncated extension")
        src = Fid(*_FID.unpack_from(buf, pos))
        sparent = Fid(*_FID.unpack_from(buf, pos + _FID.size))
        sname, pos = _read_name(buf, pos + 2 * _FID.size, reclen, "rename_source")
        rename_source = RenameSource(src, sparent, sname)
    if mask & ExtMask.UIDGID:
        if pos + _UIDGID.size > reclen:
            raise DecodeError("uid_gid", "truncated extension")
        uid_gid = _UIDGID.unpack_from(buf, pos)
        pos += _UIDGID.size
    name, pos = _read_name(buf, pos, reclen, "name")
    if pos != reclen:
        raise DecodeError("reclen", f"{reclen - pos} unaccounted bytes inside record")
    return ChangelogRecord(index, OpCode(op), time_ns, Fid(tseq, toid, tver),
                           Fid(pseq, poid, pver), name, jobid, rename_source, uid_gid)


def field_offset(ext_mask: int, field, rec: ChangelogRecord | None = None) -> int | None:
    """Byte offset of ``field`` inside a record encoded with ``ext_mask``.

    ``field`` is an extension bit or :data:`NAME`. Returns ``None`` when the
    extension is absent. A present RENAME_SOURCE has variable size, so any
    field after it needs the concrete ``rec``.
    """
    _check_mask(ext_mask)
    pos = HEADER_SIZE
    for bit in (ExtMask.JOBID, ExtMask.RENAME_SOURCE, ExtMask.UIDGID):
        present = bool(ext_mask & bit)
        if field == bit:
            return pos if present else None
        if not present:
            continue
        if bit is ExtMask.JOBID:
            pos += JOBID_SIZE
        elif bit is ExtMask.RENAME_SOURCE:
            if rec is None or rec.rename_source is None:
                raise ValueError("offset past RENAME_SOURCE needs the record")
            pos += 2 * _FID.size + 2 + len(rec.rename_source.name)
        else:
            pos += _UIDGID.size
    if field == NAME:
        return pos
    raise ValueError(f"unknown field {field!r}")


_DEFAULT_RENAME = RenameSource(ZERO_FID, ZERO_FID, b"")


def remap_record(rec: ChangelogRecord, target_mask: int) -> ChangelogRecord:
    """Return ``rec`` carrying exactly the extensions in ``target_mask``.

    Extensions present on both sides are kept as is, missing ones are filled
    with neutral values (zero jobid, zero FIDs, uid/gid 0) and extra ones
    are dropped.
    """
    _check_mask(target_mask)
    if rec.ext_mask == target_mask:
        return rec
    jobid = rec.jobid
    if target_mask & ExtMask.JOBID:
        if jobid is None:
            jobid = b""
    else:
        jobid = None
    rename = rec.rename_source
    if target_mask & ExtMask.RENAME_SOURCE:
        if rename is None:
            rename = _DEFAULT_RENAME
    else:
        rename = None
    uid_gid = rec.uid_gid
    if target_mask & ExtMask.UIDGID:
        if uid_gid is None:
            uid_gid = (0, 0)
    else:
        uid_gid = None
    return ChangelogRecord(rec.index, rec.opcode, rec.time_ns, rec.target,
                           rec.parent, rec.name, jobid, rename, uid_gid)
