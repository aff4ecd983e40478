import asyncio
import socket
import threading

import pytest

from lcap.client import SessionError, UsageError, client_connect, request_stats
from lcap.config import BrokerConfig, SourceConfig
from lcap.journal import FileJournal
from lcap.record import ExtMask
from lcap.server import BrokerServer, PortBusy
from lcap.wire import Role
from lcap.workload import Workload


class Running:
    """A broker served from a background thread."""

    def __init__(self, config):
        self.server = BrokerServer(config)
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self._main, daemon=True)
        ready = threading.Event()
        self._ready = ready
        self.thread.start()
        assert ready.wait(5)
        self.addr = "%s:%d" % self.server.address

    def _main(self):
        asyncio.set_event_loop(self.loop)

        async def main():
            await self.server.start()
            self._ready.set()
            await self.server.run()

        self.loop.run_until_complete(main())

    def stop(self):
        self.loop.call_soon_threadsafe(self.server.stop)
        self.thread.join(10)
        assert not self.thread.is_alive()


def make_journal(path, n, mdt=0, seed=7):
    j = FileJournal.create(path, mdt, writer=True, fsync=False)
    for rec in Workload(seed, mdt_id=mdt, jobid_pool=4).records(n):
        j.append(rec)
    return j


@pytest.fixture
def broker(tmp_path):
    writer = make_journal(tmp_path / "mdt0", 200)
    cfg = BrokerConfig(listen=("127.0.0.1", 0), sources=[SourceConfig(tmp_path / "mdt0", 0)],
                       poll_interval=0.005, ack_interval=0.01, shutdown_grace=1.0)
    running = Running(cfg)
    running.writer = writer
    running.path = tmp_path / "mdt0"
    yield running
    if running.thread.is_alive():
        running.stop()
    writer.close()


def drain(session, n):
    got = []
    while len(got) < n:
        m, rec = session.next(timeout=5)
        got.append(rec)
        if session.role is Role.PERSISTENT:
            session.ack(m, [rec.index])
    return got


def test_persistent_session_round_trip(broker):
    with client_connect(broker.addr, Role.PERSISTENT, "rbh", ExtMask.JOBID, 64) as s:
        assert s.consumer_id > 0
        assert s.heads == {0: 200}
        recs = drain(s, 200)
        assert [r.index for r in recs] == list(range(1, 201))
        assert all(r.ext_mask == ExtMask.JOBID for r in recs)
    broker.stop()
    assert FileJournal(broker.path).readers["lcap"] == 200


def test_two_members_share_the_stream(broker):
    a = client_connect(broker.addr, Role.PERSISTENT, "g", 0, 8, ack_batch=4)
    b = client_connect(broker.addr, Role.PERSISTENT, "g", 0, 8, ack_batch=4)
    seen = []
    for _ in range(200):
        for s in (a, b):
            try:
                m, rec = s.next(timeout=0.05)
            except TimeoutError:
                continue
            seen.append(rec.index)
            s.ack(m, [rec.index])
        if len(seen) == 200:
            break
    a.close()
    b.close()
    assert sorted(seen) == list(range(1, 201))


def test_ephemeral_gets_only_new_records(broker):
    with client_connect(broker.addr, Role.EPHEMERAL, "", 0, 1) as e:
        assert e.heads == {0: 200}
        with pytest.raises(UsageError):
            e.ack(0, [1])
        for rec in Workload(99).records(5):
            broker.writer.append(rec)
        assert [r.index for r in drain(e, 5)] == [201, 202, 203, 204, 205]


def test_bad_mask_is_refused(broker):
    with pytest.raises(SessionError) as e:
        client_connect(broker.addr, Role.PERSISTENT, "g", 0x40, 1)
    assert e.value.code == 2


def test_stats(broker):
    text = request_stats(broker.addr)
    assert "mdt 0" in text and "head 200" in text


def test_ack_batching_sends_one_frame(broker):
    s = client_connect(broker.addr, Role.PERSISTENT, "g", 0, 10, ack_batch=10, ack_interval=60)
    before = s.frames_sent
    recs = [s.next(timeout=5)[1] for _ in range(10)]
    for r in recs[:9]:
        s.ack(0, [r.index])
    assert s.frames_sent == before
    s.ack(0, [recs[9].index])
    assert s.frames_sent == before + 1
    s.close()


def test_acks_flushed_on_close(broker):
    s = client_connect(broker.addr, Role.PERSISTENT, "g", 0, 5, ack_batch=100, ack_interval=60)
    for _ in range(5):
        m, rec = s.next(timeout=5)
        s.ack(m, [rec.index])
    s.close()
    text = request_stats(broker.addr)
    assert "group g mdt 0 pending 195 in_flight 0 prefix 5" in text


def test_server_fin_ends_stream(broker):
    s = client_connect(broker.addr, Role.EPHEMERAL, "", 0, 1)
    broker.stop()
    assert s.next(timeout=5) is None
    s.close()


def test_port_busy(tmp_path, broker):
    host, port = broker.server.address
    cfg = BrokerConfig(listen=(host, port), sources=[SourceConfig(broker.path, 0)])
    server = BrokerServer(cfg)
    with pytest.raises(PortBusy):
        asyncio.run(server.start())
    for j in server.journals:
        j.close()


def test_connection_refused():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    with pytest.raises(ConnectionRefusedError):
        client_connect(f"127.0.0.1:{port}", Role.PERSISTENT, "g", 0, 1)
