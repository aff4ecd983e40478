"""Per-MDT changelog journal.

Readers follow the usual changelog loop: register once, then repeatedly
start a cursor at some index, receive records, clear (acknowledge) what
was processed, stop; finally deregister. A record stays in the journal
until every registered reader has cleared it.

:class:`Journal` keeps everything in memory and is what the simulator uses.
:class:`FileJournal` stores the same state in a directory::

    <dir>/meta                                  reader table, first_index
    <dir>/seg-<first index, 20 digits>.log      record segments
    <dir>/lock                                  held by the single writer

Segments roll at 4 MiB and are deleted whole once every record in them is
cleared. The newest segment is never deleted, so the writer never appends
to an unlinked file.
"""

from __future__ import annotations

import contextlib
import fcntl
import logging
import os
import struct
import time
from bisect import bisect_right
from pathlib import Path
from typing import Callable, Iterator

from lcap.record import ChangelogRecord, decode_record, encode_record

logger = logging.getLogger(__name__)

SEGMENT_SIZE = 4 * 1024 * 1024
SEGMENT_MAGIC = b"LCJL"
META_MAGIC = b"LCJM"
FORMAT_VERSION = 1

_SEG_HEADER = struct.Struct("<4sHI")
_META_HEADER = struct.Struct("<4sHIQI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class JournalError(Exception):
    pass


class DuplicateReader(JournalError):
    pass


class UnknownReader(JournalError):
    pass


class JournalClosed(JournalError):
    pass


class JournalLocked(JournalError):
    """Another process holds the writer lock."""


class StorageError(JournalError):
    pass


class Journal:
    """In-memory journal for one MDT."""

    def __init__(self, mdt_id: int = 0, clock: Callable[[], int] | None = None):
        self.mdt_id = mdt_id
        self.clock = clock or time.time_ns
        self.first_index = 1
        self.next_index = 1
        self.readers: dict[str, int] = {}
        self.closed = False
        self._records: dict[int, ChangelogRecord] = {}

    @property
    def last_index(self) -> int:
        return self.next_index - 1

    def __repr__(self) -> str:
        return (f"<{type(self).__name__} mdt={self.mdt_id} "
                f"[{self.first_index}, {self.next_index}) readers={self.readers}>")

    # reader bookkeeping

    def register(self, reader_id: str) -> str:
        with self._meta_txn():
            if reader_id in self.readers:
                raise DuplicateReader(reader_id)
            self.readers[reader_id] = self.first_index - 1
        logger.debug("mdt %d: registered reader %s", self.mdt_id, reader_id)
        return reader_id

    def deregister(self, reader_id: str) -> None:
        with self._meta_txn():
            if reader_id not in self.readers:
                raise UnknownReader(reader_id)
            del self.readers[reader_id]
            self._purge()

    def clear(self, reader_id: str, index: int) -> None:
        """Acknowledge every record up to ``index`` for ``reader_id``."""
        with self._meta_txn():
            if reader_id not in self.readers:
                raise UnknownReader(reader_id)
            if index >= self.next_index:
                self.refresh()
            if index >= self.next_index:
                raise JournalError(
                    f"clear index {index} beyond last record {self.last_index}")
            if index <= self.readers[reader_id]:
                return
            self.readers[reader_id] = index
            self._purge()

    def purge_floor(self) -> int:
        """Highest index every registered reader has cleared."""
        if not self.readers:
            return self.last_index
        return min(self.readers.values())

    def _purge(self) -> None:
        self.refresh()
        floor = self.purge_floor()
        if floor >= self.first_index:
            self._drop_through(floor)
            self.first_index = floor + 1

    # records

    def append(self, rec: ChangelogRecord) -> int:
        """Persist ``rec`` under the next index and return that index.

        The index carried by ``rec`` is ignored; a zero ``time_ns`` is
        filled from the journal clock.
        """
        self._check_open()
        index = self.next_index
        rec = rec.replace(index=index, time_ns=rec.time_ns or self.clock())
        self._store(rec)
        self.next_index = index + 1
        return index

    def start(self, reader_id: str, start_index: int = 0) -> Cursor:
        self._check_open()
        if reader_id not in self.readers:
            self._reload_meta()
            if reader_id not in self.readers:
                raise UnknownReader(reader_id)
        self.refresh()
        pos = min(max(start_index, self.first_index), self.next_index)
        return Cursor(self, reader_id, pos)

    def read(self, index: int) -> ChangelogRecord:
        self._check_open()
        if not self.first_index <= index < self.next_index:
            raise IndexError(f"index {index} not retained")
        return self._load(index)

    def records(self) -> Iterator[ChangelogRecord]:
        for index in range(self.first_index, self.next_index):
            yield self._load(index)

    def refresh(self) -> None:
        """Pick up records appended by another process (no-op in memory)."""

    def close(self) -> None:
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_open(self) -> None:
        if self.closed:
            raise JournalClosed(f"journal for mdt {self.mdt_id} is closed")

    # storage hooks

    @contextlib.contextmanager
    def _meta_txn(self):
        self._check_open()
        yield

    def _reload_meta(self) -> None:
        pass

    def _store(self, rec: ChangelogRecord) -> None:
        self._records[rec.index] = rec

    def _load(self, index: int) -> ChangelogRecord:
        return self._records[index]

    def _drop_through(self, floor: int) -> None:
        for index in range(self.first_index, floor + 1):
            self._records.pop(index, None)


class Cursor:
    """Single-owner read position opened by :meth:`Journal.start`."""

    def __init__(self, journal: Journal, reader_id: str, position: int):
        self.journal = journal
        self.reader_id = reader_id
        self.position = position

    def recv(self) -> ChangelogRecord | None:
        """Next record, or ``None`` at end of stream."""
        j = self.journal
        j._check_open()
        if self.position >= j.next_index:
            j.refresh()
            if self.position >= j.next_index:
                return None
        if self.position < j.first_index:
            self.position = j.first_index
        rec = j._load(self.position)
        self.position += 1
        return rec

    def __iter__(self) -> Iterator[ChangelogRecord]:
        while (rec := self.recv()) is not None:
            yield rec


class _Segment:
    __slots__ = ("first", "path", "offsets", "end")

    def __init__(self, first: int, path: Path):
        self.first = first
        self.path = path
        self.offsets: list[int] = []
        self.end = _SEG_HEADER.size

    @property
    def next_index(self) -> int:
        return self.first + len(self.offsets)


def segment_name(first_index: int) -> str:
    return f"seg-{first_index:020d}.log"


class FileJournal(Journal):
    """Journal persisted in a directory, see the module docstring."""

    def __init__(self, path, *, writer: bool = False, fsync: bool = True,
                 segment_size: int = SEGMENT_SIZE, clock=None):
        super().__init__(0, clock)
        self.path = Path(path)
        self.writer = writer
        self.fsync = fsync
        self.segment_size = segment_size
        self._segments: list[_Segment] = []
        self._handles: dict[Path, object] = {}
        self._wfile = None
        self._lock_fd: int | None = None
        if writer:
            self._lock_fd = os.open(self.path / "lock", os.O_RDWR | os.O_CREAT, 0o644)
            try:
                fcntl.flock(self._lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                os.close(self._lock_fd)
                self._lock_fd = None
                raise JournalLocked(f"{self.path} is locked by another writer") from None
        self._read_meta()
        self.refresh()
        if writer:
            self._repair_tail()

    @classmethod
    def create(cls, path, mdt_id: int, **kw) -> FileJournal:
        """Create an empty journal directory (or open it if it already exists)."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        if not (path / "meta").exists():
            seg = path / segment_name(1)
            if not seg.exists():
                with open(seg, "wb") as f:
                    f.write(_SEG_HEADER.pack(SEGMENT_MAGIC, FORMAT_VERSION, mdt_id))
                    f.flush()
                    os.fsync(f.fileno())
            _write_meta(path, mdt_id, 1, {})
        return cls(path, **kw)

    # meta sidecar

    def _read_meta(self) -> None:
        try:
            data = (self.path / "meta").read_bytes()
        except FileNotFoundError:
            raise StorageError(f"{self.path}: no journal meta file") from None
        self.mdt_id, self.first_index, self.readers = _parse_meta(data)

    def _reload_meta(self) -> None:
        with self._meta_lock():
            self._read_meta()

    @contextlib.contextmanager
    def _meta_lock(self):
        fd = os.open(self.path / "meta.lock", os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            yield
        finally:
            os.close(fd)

    @contextlib.contextmanager
    def _meta_txn(self):
        self._check_open()
        with self._meta_lock():
            self._read_meta()
            yield
            _write_meta(self.path, self.mdt_id, self.first_index, self.readers,
                        fsync=self.fsync)

    # segments

    def refresh(self) -> None:
        names = sorted(p.name for p in self.path.glob("seg-*.log"))
        known = {s.path.name for s in self._segments}
        scan_from = max(len(self._segments) - 1, 0)
        for name in names:
            if name not in known:
                first = int(name[4:-4])
                if self._segments and first < self._segments[-1].first:
                    continue
                self._segments.append(_Segment(first, self.path / name))
        if not self._segments:
            raise StorageError(f"{self.path}: no segment files")
        # earlier segments were complete when the writer rolled past them
        for seg in self._segments[scan_from:]:
            self._scan(seg)
        self.next_index = self._segments[-1].next_index
        if self.first_index > self.next_index:
            raise StorageError(
                f"{self.path}: meta first_index {self.first_index} beyond "
                f"last segment end {self.next_index}")

    def _scan(self, seg: _Segment) -> None:
        try:
            size = seg.path.stat().st_size
        except FileNotFoundError:
            return
        if size <= seg.end:
            return
        with open(seg.path, "rb") as f:
            if seg.end == _SEG_HEADER.size and not seg.offsets:
                magic, _version, mdt = _SEG_HEADER.unpack(f.read(_SEG_HEADER.size))
                if magic != SEGMENT_MAGIC:
                    raise StorageError(f"{seg.path}: bad segment magic")
            f.seek(seg.end)
            data = f.read(size - seg.end)
        pos = 0
        while pos + 4 <= len(data):
            (reclen,) = _U32.unpack_from(data, pos)
            if reclen < 58:
                raise StorageError(f"{seg.path}: corrupt record at byte {seg.end + pos}")
            if pos + reclen > len(data):
                break
            seg.offsets.append(seg.end + pos)
            pos += reclen
        seg.end += pos

    def _repair_tail(self) -> None:
        seg = self._segments[-1]
        if seg.path.stat().st_size > seg.end:
            logger.warning("%s: truncating torn record at byte %d", seg.path, seg.end)
            os.truncate(seg.path, seg.end)

    def _find(self, index: int) -> _Segment:
        firsts = [s.first for s in self._segments]
        return self._segments[bisect_right(firsts, index) - 1]

    def _store(self, rec: ChangelogRecord) -> None:
        if not self.writer:
            raise StorageError("journal opened read-only")
        data = encode_record(rec)
        seg = self._segments[-1]
        if seg.offsets and seg.end + len(data) > self.segment_size:
            seg = self._roll(rec.index)
        if self._wfile is None:
            self._wfile = open(seg.path, "ab")
        try:
            self._wfile.write(data)
            self._wfile.flush()
            if self.fsync:
                os.fsync(self._wfile.fileno())
        except OSError as exc:
            raise StorageError(f"append to {seg.path} failed: {exc}") from exc
        seg.offsets.append(seg.end)
        seg.end += len(data)

    def _roll(self, first: int) -> _Segment:
        if self._wfile is not None:
            self._wfile.close()
            self._wfile = None
        seg = _Segment(first, self.path / segment_name(first))
        with open(seg.path, "wb") as f:
            f.write(_SEG_HEADER.pack(SEGMENT_MAGIC, FORMAT_VERSION, self.mdt_id))
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        self._segments.append(seg)
        return seg

    def _load(self, index: int) -> ChangelogRecord:
        seg = self._find(index)
        off = seg.offsets[index - seg.first]
        f = self._handles.get(seg.path)
        if f is None:
            f = self._handles[seg.path] = open(seg.path, "rb")
        f.seek(off)
        head = f.read(4)
        (reclen,) = _U32.unpack(head)
        return decode_record(head + f.read(reclen - 4))

    def _drop_through(self, floor: int) -> None:
        while len(self._segments) > 1 and self._segments[1].first <= floor + 1:
            seg = self._segments.pop(0)
            f = self._handles.pop(seg.path, None)
            if f is not None:
                f.close()
            with contextlib.suppress(FileNotFoundError):
                seg.path.unlink()
            logger.debug("purged segment %s", seg.path.name)

    def close(self) -> None:
        if self.closed:
            return
        for f in self._handles.values():
            f.close()
        self._handles.clear()
        if self._wfile is not None:
            self._wfile.close()
            self._wfile = None
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
        super().close()


def _parse_meta(data: bytes) -> tuple[int, int, dict[str, int]]:
    try:
        magic, version, mdt_id, first_index, count = _META_HEADER.unpack_from(data, 0)
        if magic != META_MAGIC or version != FORMAT_VERSION:
            raise StorageError("bad journal meta header")
        pos = _META_HEADER.size
        readers = {}
        for _ in range(count):
            (n,) = _U16.unpack_from(data, pos)
            pos += 2
            rid = data[pos:pos + n].decode()
            pos += n
            (readers[rid],) = _U64.unpack_from(data, pos)
            pos += 8
    except struct.error as exc:
        raise StorageError(f"truncated journal meta: {exc}") from None
    return mdt_id, first_index, readers


def _write_meta(path: Path, mdt_id: int, first_index: int, readers: dict[str, int],
                fsync: bool = True) -> None:
    parts = [_META_HEADER.pack(META_MAGIC, FORMAT_VERSION, mdt_id, first_index, len(readers))]
    for rid, cleared in readers.items():
        raw = rid.encode()
        parts.append(_U16.pack(len(raw)) + raw + _U64.pack(cleared))
    tmp = path / "meta.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
        f.flush()
        if fsync:
            os.fsync(f.fileno())
    os.replace(tmp, path / "meta")


def open_journal(path, *, writer: bool = False, **kw) -> FileJournal:
    return FileJournal(path, writer=writer, **kw)
