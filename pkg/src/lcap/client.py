"""Blocking consumer-side client.

Usage mirrors the changelog reader loop::

    with client_connect("127.0.0.1:5658", Role.PERSISTENT, "rbh", window=64) as s:
        for mdt_id, rec in s:
            process(rec)
            s.ack(mdt_id, [rec.index])

Acks are batched: a frame goes out once ``ack_batch`` indices are pending,
when ``ack_interval`` seconds passed since the first pending one, and on
close.
"""

from __future__ import annotations

import select
import socket
import time
from collections import deque
from typing import Iterator

from lcap import wire
from lcap.config import parse_addr
from lcap.record import ChangelogRecord
from lcap.wire import FrameReader, Role

DEFAULT_TIMEOUT = 10.0


class SessionError(Exception):
    def __init__(self, message: str, code: int | None = None):
        super().__init__(message)
        self.code = code


class UsageError(SessionError):
    pass


class Session:
    def __init__(self, sock: socket.socket, role: Role, mask: int, *, ack_batch: int = 64,
                 ack_interval: float = 0.1, timeout: float = DEFAULT_TIMEOUT):
        self.sock = sock
        self.role = Role(role)
        self.mask = mask
        self.ack_batch = max(ack_batch, 1)
        self.ack_interval = ack_interval
        self.timeout = timeout
        self.consumer_id = 0
        self.heads: dict[int, int] = {}
        self.eof = False
        self.fin = False
        self.error: SessionError | None = None
        self.last_stats: str | None = None
        self.frames_sent = 0
        self._reader = FrameReader()
        self._records: deque[tuple[int, ChangelogRecord]] = deque()
        self._acks: dict[int, list[int]] = {}
        self._nacks = 0
        self._ack_since: float | None = None

    def _send(self, m: wire.Message) -> None:
        try:
            self.sock.sendall(wire.frame_encode(m))
        except OSError as exc:
            self._fail(SessionError(f"send failed: {exc}"))
        self.frames_sent += 1

    def _fail(self, err: SessionError):
        self.error = err
        raise err

    def _check(self) -> None:
        if self.error is not None:
            raise self.error

    def _read(self, timeout: float | None) -> bool:
        """Wait up to ``timeout`` for data; process it. False on timeout."""
        ready, _, _ = select.select([self.sock], [], [], timeout)
        if not ready:
            return False
        try:
            data = self.sock.recv(65536)
        except OSError as exc:
            self._fail(SessionError(f"receive failed: {exc}"))
        if not data:
            self.eof = True
            return True
        try:
            messages = list(self._reader.feed(data))
        except wire.FrameError as exc:
            self._fail(SessionError(f"bad frame from broker: {exc}"))
        for m in messages:
            self._on_message(m)
        return True

    def _on_message(self, m: wire.Message) -> None:
        if isinstance(m, wire.Recs):
            for rec in m.records:
                if rec.ext_mask != self.mask:
                    self._fail(SessionError(
                        f"record {rec.index} has mask {int(rec.ext_mask)}, session mask {self.mask}"))
                self._records.append((m.mdt_id, rec))
        elif isinstance(m, wire.HelloAck):
            self.consumer_id = m.consumer_id
            self.heads = m.heads
        elif isinstance(m, wire.Fin):
            self.fin = self.eof = True
        elif isinstance(m, wire.Error):
            self._fail(SessionError(f"broker error {m.code}: {m.message}", m.code))
        elif isinstance(m, wire.Stats):
            self.last_stats = m.text
        else:
            self._fail(SessionError(f"unexpected {m.type.name} from broker"))

    def handshake(self, group: str, window: int) -> None:
        self._send(wire.Hello(self.role, window, self.mask, group))
        deadline = time.monotonic() + self.timeout
        while not self.consumer_id:
            left = deadline - time.monotonic()
            if left <= 0:
                self._fail(SessionError("timed out waiting for HELLO_ACK"))
            self._read(left)
            if self.eof and not self.consumer_id:
                self._fail(SessionError("broker closed the session during handshake"))

    def next(self, timeout: float | None = None) -> tuple[int, ChangelogRecord] | None:
        """Next ``(mdt_id, record)``; ``None`` once the broker sent FIN.

        Blocks until a record arrives, or raises :class:`TimeoutError` after
        ``timeout`` seconds when one is given.
        """
        self._check()
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._records:
            if self.fin:
                return None
            if self.eof:
                self._fail(SessionError("connection closed by broker"))
            wait = None if deadline is None else max(deadline - time.monotonic(), 0)
            if self._ack_since is not None:
                due = max(self._ack_since + self.ack_interval - time.monotonic(), 0)
                wait = due if wait is None else min(wait, due)
            if not self._read(wait):
                if self._ack_since is not None and \
                        time.monotonic() >= self._ack_since + self.ack_interval:
                    self.flush()
                elif deadline is not None and time.monotonic() >= deadline:
                    raise TimeoutError("no record within timeout")
        return self._records.popleft()

    def __iter__(self) -> Iterator[tuple[int, ChangelogRecord]]:
        while (item := self.next()) is not None:
            yield item

    def ack(self, mdt_id: int, indices) -> None:
        if self.role is Role.EPHEMERAL:
            raise UsageError("ephemeral sessions do not acknowledge records")
        self._check()
        pending = self._acks.setdefault(mdt_id, [])
        pending.extend(indices)
        self._nacks += len(indices)
        now = time.monotonic()
        if self._ack_since is None:
            self._ack_since = now
        if self._nacks >= self.ack_batch or now >= self._ack_since + self.ack_interval:
            self.flush()

    def flush(self) -> None:
        for mdt_id, indices in self._acks.items():
            if indices:
                self._send(wire.Ack(mdt_id, indices))
        self._acks = {}
        self._nacks = 0
        self._ack_since = None

    def stats(self) -> str:
        self._send(wire.StatsReq())
        self.last_stats = None
        deadline = time.monotonic() + self.timeout
        while self.last_stats is None:
            if self.eof:
                self._fail(SessionError("connection closed by broker"))
            if not self._read(max(deadline - time.monotonic(), 0)):
                self._fail(SessionError("timed out waiting for STATS"))
        return self.last_stats

    def close(self) -> None:
        """Flush acks, say FIN and wait for the broker to confirm."""
        if self.sock.fileno() < 0:
            return
        try:
            if self.error is None:
                if self.role is Role.PERSISTENT:
                    self.flush()
                self._send(wire.Fin())
                deadline = time.monotonic() + self.timeout
                self.eof = False
                while not self.eof and time.monotonic() < deadline:
                    self._records.clear()
                    self._read(max(deadline - time.monotonic(), 0))
        except SessionError:
            pass
        finally:
            self.sock.close()

    def __enter__(self) -> Session:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _dial(addr, timeout: float) -> socket.socket:
    host, port = parse_addr(addr) if isinstance(addr, str) else addr
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def client_connect(addr, role: Role = Role.PERSISTENT, group: str = "", mask: int = 0,
                   window: int = 64, *, timeout: float = DEFAULT_TIMEOUT, ack_batch: int = 64,
                   ack_interval: float = 0.1) -> Session:
    """Open a session. ``ConnectionRefusedError`` propagates unchanged."""
    sock = _dial(addr, timeout)
    s = Session(sock, role, mask, ack_batch=ack_batch, ack_interval=ack_interval, timeout=timeout)
    try:
        s.handshake(group, window)
    except BaseException:
        sock.close()
        raise
    return s


def request_stats(addr, timeout: float = DEFAULT_TIMEOUT) -> str:
    sock = _dial(addr, timeout)
    s = Session(sock, Role.EPHEMERAL, 0, timeout=timeout)
    try:
        return s.stats()
    finally:
        sock.close()
