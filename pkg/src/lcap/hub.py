"""Binds framed consumer sessions to a :class:`~lcap.broker.Broker`.

The hub owns no sockets. A transport calls :meth:`Hub.receive` with bytes
read from a connection, :meth:`Hub.pump` after anything changed, then
writes out whatever :meth:`Hub.take_output` returns. The asyncio server and
the in-memory simulator both drive it the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from lcap import wire
from lcap.broker import BadMask, Broker, Mode, ProtocolError
from lcap.wire import ErrorCode, FrameError, FrameReader

logger = logging.getLogger(__name__)

RECS_BATCH = 1024
EPHEMERAL_CHUNK = 256
OUTPUT_SOFT_LIMIT = 256 * 1024


@dataclass(eq=False)
class Connection:
    conn_id: int
    reader: FrameReader = field(default_factory=FrameReader)
    out: bytearray = field(default_factory=bytearray)
    consumer_id: int | None = None
    closing: bool = False
    closed: bool = False

    def send(self, m: wire.Message) -> None:
        self.out += wire.frame_encode(m)


class Hub:
    def __init__(self, broker: Broker, writable: Callable[[Connection], bool] | None = None):
        self.broker = broker
        self.conns: dict[int, Connection] = {}
        self.by_consumer: dict[int, Connection] = {}
        self.writable = writable or (lambda c: len(c.out) < OUTPUT_SOFT_LIMIT)
        self._next_conn = 1

    def open(self) -> Connection:
        conn = Connection(self._next_conn)
        self._next_conn += 1
        self.conns[conn.conn_id] = conn
        return conn

    def receive(self, conn: Connection, data: bytes) -> None:
        if conn.closing or conn.closed:
            return
        try:
            for msg in conn.reader.feed(data):
                self._handle(conn, msg)
                if conn.closing:
                    return
        except FrameError as exc:
            self._fail(conn, exc.code, str(exc))

    def _fail(self, conn: Connection, code: ErrorCode, message: str) -> None:
        logger.warning("connection %d: %s", conn.conn_id, message)
        conn.send(wire.Error(code, message))
        self._detach(conn, crash=True)
        conn.closing = True

    def _detach(self, conn: Connection, crash: bool) -> None:
        if conn.consumer_id is not None:
            self.broker.leave(conn.consumer_id, crash=crash)
            self.by_consumer.pop(conn.consumer_id, None)
            conn.consumer_id = None

    def _handle(self, conn: Connection, msg: wire.Message) -> None:
        b = self.broker
        if isinstance(msg, wire.StatsReq):
            conn.send(wire.Stats(b.stats_text()))
        elif isinstance(msg, wire.Hello):
            if conn.consumer_id is not None:
                raise FrameError("second HELLO on one session")
            try:
                c = b.join(msg.group, Mode(msg.role), msg.mask, msg.window)
            except BadMask as exc:
                self._fail(conn, ErrorCode.BAD_MASK, str(exc))
                return
            except ProtocolError as exc:
                self._fail(conn, ErrorCode.PROTOCOL, str(exc))
                return
            conn.consumer_id = c.consumer_id
            self.by_consumer[c.consumer_id] = conn
            heads = c.snapshot if c.mode is Mode.EPHEMERAL else b.heads()
            conn.send(wire.HelloAck(c.consumer_id, heads))
        elif isinstance(msg, wire.Ack):
            if conn.consumer_id is None:
                raise FrameError("ACK before HELLO")
            try:
                b.ack(conn.consumer_id, msg.mdt_id, msg.indices)
            except ProtocolError as exc:
                self._fail(conn, ErrorCode.BAD_ACK, str(exc))
        elif isinstance(msg, wire.Fin):
            self._detach(conn, crash=False)
            conn.send(wire.Fin())
            conn.closing = True
        else:
            raise FrameError(f"unexpected {msg.type.name} from consumer")

    def close(self, conn: Connection, crash: bool = True) -> None:
        """The transport lost or closed ``conn``."""
        if conn.closed:
            return
        self._detach(conn, crash)
        conn.closed = True
        self.conns.pop(conn.conn_id, None)

    def pump(self) -> None:
        b = self.broker
        batches: dict[tuple[int, int], list] = {}
        for d in b.dispatch():
            batches.setdefault((d.consumer_id, d.mdt_id), []).append(d.record)
        for (cid, mdt), records in batches.items():
            conn = self.by_consumer[cid]
            for i in range(0, len(records), RECS_BATCH):
                conn.send(wire.Recs(mdt, records[i:i + RECS_BATCH]))
        while b.evicted:
            cid, kind, reason = b.evicted.popleft()
            conn = self.by_consumer.pop(cid, None)
            if conn is not None:
                conn.consumer_id = None
                code = ErrorCode.SLOW_CONSUMER if kind == "slow" else ErrorCode.PROTOCOL
                conn.send(wire.Error(code, reason))
                conn.closing = True
        for cid, conn in list(self.by_consumer.items()):
            c = b.consumers.get(cid)
            if c is None or c.mode is not Mode.EPHEMERAL or not c.queue:
                continue
            while c.queue and self.writable(conn):
                grouped: dict[int, list] = {}
                for mdt, rec in b.take_ephemeral(cid, EPHEMERAL_CHUNK):
                    grouped.setdefault(mdt, []).append(rec)
                for mdt, records in grouped.items():
                    conn.send(wire.Recs(mdt, records))

    def take_output(self, conn: Connection) -> bytes:
        data = bytes(conn.out)
        conn.out.clear()
        return data

    def shutdown(self) -> None:
        """Tell every consumer the stream is over."""
        for conn in self.conns.values():
            if not conn.closing and conn.consumer_id is not None:
                conn.send(wire.Fin())
