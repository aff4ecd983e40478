"""Changelog aggregate-and-publish broker core.

The broker is one reader of every source journal. It pulls records greedily
into memory, runs the pre-processing pipeline, and hands each surviving
record to every consumer group, where it is load balanced across the
group's members. Members acknowledge individual records; per group and per
MDT an :class:`~lcap.tracker.AckTracker` rebuilds the contiguous prefix,
and the journal is cleared up to the minimum prefix over all groups.

Ephemeral consumers belong to no group. They only get records appended
after they joined, never acknowledge, and never hold back clearing.

This module has no I/O of its own beyond the journals: callers (the TCP
server, the simulator) move deliveries to consumers and feed acks back.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, NamedTuple

from lcap.journal import Cursor, Journal, JournalError
from lcap.preprocess import DEFAULT_MAX_SPAN, load_pipeline, pipeline_apply
from lcap.record import RESERVED_BITS, ChangelogRecord, ExtMask, remap_record
from lcap.tracker import AckTracker

logger = logging.getLogger(__name__)

READER_ID = "lcap"
MAX_BACKOFF = 64


class Mode(IntEnum):
    PERSISTENT = 1
    EPHEMERAL = 2


class BrokerError(Exception):
    pass


class ProtocolError(BrokerError):
    """A consumer broke the protocol; its connection should be dropped."""


class BadMask(BrokerError):
    pass


class Delivery(NamedTuple):
    consumer_id: int
    mdt_id: int
    record: ChangelogRecord


@dataclass
class SourceBuffer:
    """Records fetched from one journal and still owed to some group."""

    mdt_id: int
    journal: Journal
    cursor: Cursor
    upstream_position: int
    cleared: int
    records: dict[int, ChangelogRecord] = field(default_factory=dict)
    refs: dict[int, int] = field(default_factory=dict)
    backoff: int = 0
    skip: int = 0

    @property
    def buffered(self) -> int:
        return len(self.records)


@dataclass
class ConsumerState:
    consumer_id: int
    group: str | None
    mode: Mode
    mask: ExtMask
    window: int
    in_flight: set[tuple[int, int]] = field(default_factory=set)
    snapshot: dict[int, int] = field(default_factory=dict)
    queue: deque = field(default_factory=deque)

    @property
    def spare(self) -> int:
        return self.window - len(self.in_flight)


@dataclass
class GroupState:
    name: str
    start: dict[int, int]
    trackers: dict[int, AckTracker]
    pending: dict[int, deque] = field(default_factory=dict)
    members: dict[int, ConsumerState] = field(default_factory=dict)
    redeliver: set[tuple[int, int]] = field(default_factory=set)
    rr_member: int = 0
    rr_mdt: int = 0

    @property
    def requested_mask(self) -> ExtMask:
        mask = ExtMask.NONE
        for c in self.members.values():
            mask |= c.mask
        return mask

    def in_flight(self, mdt_id: int) -> list[int]:
        return [i for c in self.members.values() for (m, i) in c.in_flight if m == mdt_id]


class Broker:
    """In-memory broker state; see the module docstring."""

    def __init__(self, journals: Iterable[Journal], *, hwm: int = 4096, batch: int = 256,
                 eq_limit: int = 1024, auto_ack_no_groups: bool = False,
                 pipeline: Iterable[str] = (), max_span: int = DEFAULT_MAX_SPAN,
                 reader_id: str = READER_ID,
                 on_event: Callable[..., None] | None = None):
        if hwm < 1 or batch < 1 or eq_limit < 1:
            raise ValueError("hwm, batch and eq_limit must be positive")
        self.hwm = hwm
        self.batch = min(batch, max_span)
        self.eq_limit = eq_limit
        self.auto_ack_no_groups = auto_ack_no_groups
        self.pipeline = load_pipeline(pipeline)
        self.reader_id = reader_id
        self.on_event = on_event
        self.sources: dict[int, SourceBuffer] = {}
        self.groups: dict[str, GroupState] = {}
        self.consumers: dict[int, ConsumerState] = {}
        # (consumer_id, kind, reason); kind is "slow" or "removed"
        self.evicted: deque[tuple[int, str, str]] = deque()
        self._next_id = 1
        for j in sorted(journals, key=lambda j: j.mdt_id):
            self.add_source(j)

    def _emit(self, kind: str, **fields) -> None:
        if self.on_event is not None:
            self.on_event(kind, **fields)

    def add_source(self, journal: Journal) -> SourceBuffer:
        if journal.mdt_id in self.sources:
            raise BrokerError(f"duplicate source for mdt {journal.mdt_id}")
        if self.reader_id not in journal.readers:
            journal.register(self.reader_id)
        cleared = journal.readers[self.reader_id]
        cursor = journal.start(self.reader_id, cleared + 1)
        src = SourceBuffer(journal.mdt_id, journal, cursor, cursor.position, cleared)
        self.sources[journal.mdt_id] = src
        for g in self.groups.values():
            self._attach_source(g, src)
        return src

    def _attach_source(self, g: GroupState, src: SourceBuffer) -> None:
        g.start[src.mdt_id] = src.upstream_position
        g.trackers[src.mdt_id] = AckTracker(src.upstream_position - 1)
        g.pending[src.mdt_id] = deque()

    def heads(self) -> dict[int, int]:
        """Last index appended upstream, per MDT."""
        out = {}
        for m, src in self.sources.items():
            src.journal.refresh()
            out[m] = src.journal.last_index
        return out

    # ingestion

    def ingest_tick(self, mdt_id: int) -> int:
        """Fetch one batch from ``mdt_id``'s journal and route it."""
        src = self.sources[mdt_id]
        if src.skip:
            src.skip -= 1
            return 0
        if self.groups:
            room = self.hwm - src.buffered
        elif self.auto_ack_no_groups:
            room = self.batch
        else:
            # nothing clears while groupless; keep the read-ahead rewindable
            room = self.hwm - (src.upstream_position - 1 - src.cleared)
        n = min(self.batch, room)
        if n <= 0:
            return 0
        fetched = []
        try:
            while len(fetched) < n:
                rec = src.cursor.recv()
                if rec is None:
                    break
                fetched.append(rec)
            src.backoff = 0
        except (JournalError, OSError) as exc:
            src.backoff = min(max(src.backoff * 2, 1), MAX_BACKOFF)
            src.skip = src.backoff
            logger.warning("mdt %d: read failed (%s), retrying in %d ticks",
                           mdt_id, exc, src.skip)
        if not fetched:
            return 0
        src.upstream_position = fetched[-1].index + 1
        for rec in fetched:
            self._emit("ingested", mdt=mdt_id, index=rec.index)
        self._route(src, fetched)
        return len(fetched)

    def ingest_all(self) -> int:
        return sum(self.ingest_tick(m) for m in self.sources)

    def _route(self, src: SourceBuffer, fetched: list[ChangelogRecord]) -> None:
        m = src.mdt_id
        result = pipeline_apply(self.pipeline, fetched)
        groups = list(self.groups.values())
        for index in sorted(result.dropped):
            self._emit("dropped", mdt=m, index=index)
            for g in groups:
                g.trackers[m].add(index)
        if groups:
            for rec in result.kept:
                src.records[rec.index] = rec
                src.refs[rec.index] = len(groups)
            for g in groups:
                g.pending[m].extend(result.kept)
        self._broadcast(m, result.kept)

    # membership

    def join(self, group: str | None, mode: Mode, mask: int, window: int) -> ConsumerState:
        if mask & RESERVED_BITS:
            raise BadMask(f"reserved mask bits set: {mask:#06x}")
        if window < 1:
            raise ProtocolError(f"window must be at least 1, got {window}")
        cid = self._next_id
        self._next_id += 1
        mode = Mode(mode)
        if mode is Mode.PERSISTENT:
            name = group or ""
            g = self.groups.get(name)
            if g is None:
                first = not self.groups
                g = self.groups[name] = GroupState(name, {}, {})
                dropped = []
                for src in self.sources.values():
                    self._attach_source(g, src)
                    if first and not self.auto_ack_no_groups:
                        dropped += self._rewind(g, src)
                self._emit("group-created", group=name, data=dict(g.start))
                for m, index in dropped:
                    self._emit("dropped", mdt=m, index=index)
            c = ConsumerState(cid, name, mode, ExtMask(mask), window)
            g.members[cid] = c
            self._emit("joined", consumer=cid, group=name, data=window)
        else:
            c = ConsumerState(cid, None, mode, ExtMask(mask), window, snapshot=self.heads())
            self._emit("ephemeral-joined", consumer=cid, data=dict(c.snapshot))
        self.consumers[cid] = c
        logger.info("consumer %d joined (%s, group %r, window %d)", cid, mode.name, group, window)
        return c

    def _rewind(self, g: GroupState, src: SourceBuffer) -> list[tuple[int, int]]:
        """Start the first group at the oldest uncleared record.

        Records read while no group existed were never buffered; fetch them
        again from the journal, which still holds everything past the clear.
        """
        m = src.mdt_id
        start = src.cleared + 1
        g.start[m] = start
        g.trackers[m] = AckTracker(start - 1)
        span = self.batch
        dropped = []
        for lo in range(start, src.upstream_position, span):
            hi = min(lo + span, src.upstream_position)
            result = pipeline_apply(self.pipeline, [src.journal.read(i) for i in range(lo, hi)])
            for index in sorted(result.dropped):
                g.trackers[m].add(index)
                dropped.append((m, index))
            for rec in result.kept:
                src.records[rec.index] = rec
                src.refs[rec.index] = 1
            g.pending[m].extend(result.kept)
        return dropped

    def leave(self, consumer_id: int, crash: bool = False) -> None:
        """Forget a consumer. Records it held unacknowledged are queued again."""
        c = self.consumers.pop(consumer_id, None)
        if c is None:
            return
        self._emit("left", consumer=consumer_id, group=c.group or "", data=crash)
        if c.mode is Mode.EPHEMERAL:
            c.queue.clear()
            return
        g = self.groups[c.group]
        del g.members[consumer_id]
        by_mdt: dict[int, list[int]] = {}
        for m, i in c.in_flight:
            by_mdt.setdefault(m, []).append(i)
        for m, indices in by_mdt.items():
            src = self.sources[m]
            for i in sorted(indices, reverse=True):
                g.pending[m].appendleft(src.records[i])
                g.redeliver.add((m, i))
                self._emit("requeued", consumer=consumer_id, group=g.name, mdt=m, index=i)
        c.in_flight.clear()

    def remove_group(self, name: str) -> None:
        """Drop a group; its members are evicted and it stops gating clears."""
        g = self.groups[name]
        for cid in list(g.members):
            self.leave(cid)
            self.evicted.append((cid, "removed", f"group {name!r} removed"))
        del self.groups[name]
        for m, src in self.sources.items():
            tracker = g.trackers[m]
            for i in list(src.records):
                if i not in tracker:
                    self._release(src, i)
        self._emit("group-removed", group=name)

    # delivery

    def dispatch(self, group: str | None = None) -> list[Delivery]:
        """Assign pending records round-robin to members with spare window."""
        groups = [self.groups[group]] if group is not None else list(self.groups.values())
        out: list[Delivery] = []
        for g in groups:
            self._dispatch_group(g, out)
        return out

    def _dispatch_group(self, g: GroupState, out: list[Delivery]) -> None:
        if not g.members:
            return
        members = sorted(g.members)
        mdts = sorted(g.pending)
        while True:
            c = self._next_member(g, members)
            if c is None:
                return
            m = self._next_mdt(g, mdts)
            if m is None:
                return
            rec = g.pending[m].popleft()
            key = (m, rec.index)
            c.in_flight.add(key)
            g.rr_member = c.consumer_id
            out.append(Delivery(c.consumer_id, m, remap_record(rec, c.mask)))
            self._emit("assigned", consumer=c.consumer_id, group=g.name, mdt=m, index=rec.index)
            if key in g.redeliver:
                g.redeliver.discard(key)
                self._emit("redelivered", consumer=c.consumer_id, group=g.name,
                           mdt=m, index=rec.index)

    @staticmethod
    def _next_member(g: GroupState, members: list[int]) -> ConsumerState | None:
        n = len(members)
        start = 0
        for pos, cid in enumerate(members):
            if cid > g.rr_member:
                start = pos
                break
        for k in range(n):
            c = g.members[members[(start + k) % n]]
            if c.spare > 0:
                return c
        return None

    @staticmethod
    def _next_mdt(g: GroupState, mdts: list[int]) -> int | None:
        n = len(mdts)
        start = 0
        for pos, m in enumerate(mdts):
            if m > g.rr_mdt:
                start = pos
                break
        for k in range(n):
            m = mdts[(start + k) % n]
            if g.pending[m]:
                g.rr_mdt = m
                return m
        return None

    def ack(self, consumer_id: int, mdt_id: int, indices: Iterable[int]) -> None:
        c = self.consumers.get(consumer_id)
        if c is None:
            raise ProtocolError(f"unknown consumer {consumer_id}")
        if c.mode is Mode.EPHEMERAL:
            raise ProtocolError("ephemeral consumers do not acknowledge")
        g = self.groups[c.group]
        tracker = g.trackers.get(mdt_id)
        indices = list(indices)
        for i in indices:
            if (mdt_id, i) not in c.in_flight and (tracker is None or i not in tracker):
                raise ProtocolError(f"ack for unassigned record {mdt_id}:{i}")
        src = self.sources[mdt_id]
        for i in indices:
            key = (mdt_id, i)
            if key not in c.in_flight:
                continue
            c.in_flight.remove(key)
            if i in tracker:
                self._emit("acked", consumer=consumer_id, group=g.name, mdt=mdt_id, index=i,
                           data="duplicate")
                continue
            tracker.add(i)
            self._release(src, i)
            self._emit("acked", consumer=consumer_id, group=g.name, mdt=mdt_id, index=i)

    def _release(self, src: SourceBuffer, index: int) -> None:
        left = src.refs[index] - 1
        if left:
            src.refs[index] = left
        else:
            del src.refs[index]
            del src.records[index]

    def _broadcast(self, mdt_id: int, records: list[ChangelogRecord]) -> None:
        for c in [c for c in self.consumers.values() if c.mode is Mode.EPHEMERAL]:
            floor = c.snapshot.get(mdt_id, 0)
            for rec in records:
                if rec.index <= floor:
                    continue
                if len(c.queue) >= self.eq_limit:
                    self._evict(c.consumer_id, f"outbound queue over {self.eq_limit} records")
                    break
                c.queue.append((mdt_id, remap_record(rec, c.mask)))

    def _evict(self, consumer_id: int, reason: str) -> None:
        logger.warning("evicting consumer %d: %s", consumer_id, reason)
        self.leave(consumer_id, crash=True)
        self.evicted.append((consumer_id, "slow", reason))
        self._emit("evicted", consumer=consumer_id, data=reason)

    def take_ephemeral(self, consumer_id: int, limit: int | None = None) -> list[tuple[int, ChangelogRecord]]:
        c = self.consumers[consumer_id]
        q = c.queue
        n = len(q) if limit is None else min(limit, len(q))
        return [q.popleft() for _ in range(n)]

    # upstream acknowledgment

    def upstream_ack(self) -> dict[int, int]:
        """Clear each journal up to what every persistent group has acknowledged."""
        cleared = {}
        for m, src in self.sources.items():
            if self.groups:
                target = min(g.trackers[m].prefix for g in self.groups.values())
            elif self.auto_ack_no_groups:
                target = src.upstream_position - 1
            else:
                continue
            if target <= src.cleared:
                continue
            try:
                src.journal.clear(self.reader_id, target)
            except (JournalError, OSError) as exc:
                logger.warning("mdt %d: clear to %d failed (%s), will retry", m, target, exc)
                continue
            src.cleared = target
            cleared[m] = target
            self._emit("cleared", mdt=m, index=target)
        return cleared

    # introspection

    def check_conservation(self) -> list[str]:
        """Per group and MDT, check that pending, in-flight, acknowledged and
        not-yet-ingested indices partition everything since the group started."""
        problems = []
        for g in self.groups.values():
            for m, src in self.sources.items():
                start, end, pos = g.start[m], src.journal.next_index, src.upstream_position
                tracker = g.trackers[m]
                pending = [r.index for r in g.pending[m]]
                flying = g.in_flight(m)
                owed = pending + flying
                total = len(owed) + tracker.acked_count(start) + (end - pos)
                if len(set(owed)) != len(owed):
                    problems.append(f"{g.name}/{m}: index both pending and in flight, or twice")
                bad = [i for i in owed if not start <= i < pos or i in tracker]
                if bad:
                    problems.append(f"{g.name}/{m}: owed indices {bad[:5]} acked or out of range")
                if tracker.prefix >= pos or any(i >= pos for i in tracker.above):
                    problems.append(f"{g.name}/{m}: tracker past ingestion position {pos}")
                if total != end - start:
                    problems.append(f"{g.name}/{m}: {total} indices accounted, expected {end - start}")
        return problems

    def stats(self) -> dict:
        heads = self.heads()
        return {
            "mdts": {m: {"position": s.upstream_position, "cleared": s.cleared,
                         "head": heads[m], "buffered": s.buffered}
                     for m, s in self.sources.items()},
            "groups": {name: {"members": len(g.members),
                              "mdts": {m: {"pending": len(g.pending[m]),
                                           "in_flight": len(g.in_flight(m)),
                                           "prefix": g.trackers[m].prefix}
                                       for m in self.sources}}
                       for name, g in self.groups.items()},
            "ephemeral": sum(1 for c in self.consumers.values() if c.mode is Mode.EPHEMERAL),
        }

    def stats_text(self) -> str:
        st = self.stats()
        lines = []
        for m, s in st["mdts"].items():
            lines.append(f"mdt {m} position {s['position']} cleared {s['cleared']} "
                         f"head {s['head']} buffered {s['buffered']}")
        for name, g in st["groups"].items():
            lines.append(f"group {name} members {g['members']}")
            for m, s in g["mdts"].items():
                lines.append(f"group {name} mdt {m} pending {s['pending']} "
                             f"in_flight {s['in_flight']} prefix {s['prefix']}")
        lines.append(f"ephemeral {st['ephemeral']}")
        return "\n".join(lines) + "\n"
