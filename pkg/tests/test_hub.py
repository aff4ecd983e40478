from lcap import wire
from lcap.broker import Broker
from lcap.hub import Hub
from lcap.journal import Journal
from lcap.wire import ErrorCode, FrameReader, Role, frame_encode
from lcap.workload import Workload


def setup(n=10, **kw):
    j = Journal(0, clock=lambda: 1)
    for rec in Workload(2).records(n):
        j.append(rec)
    b = Broker([j], **kw)
    return j, b, Hub(b)


def talk(hub, conn, *msgs):
    hub.receive(conn, b"".join(frame_encode(m) for m in msgs))
    hub.pump()
    return list(FrameReader().feed(hub.take_output(conn)))


def test_hello_and_records():
    j, b, hub = setup()
    c = hub.open()
    out = talk(hub, c, wire.Hello(Role.PERSISTENT, 4, 0, "g"))
    assert out[0] == wire.HelloAck(1, {0: 10})
    b.ingest_all()
    hub.pump()
    (recs,) = FrameReader().feed(hub.take_output(c))
    assert [r.index for r in recs.records] == [1, 2, 3, 4]
    talk(hub, c, wire.Ack(0, [1, 2, 3, 4]))
    assert b.groups["g"].trackers[0].prefix == 4


def test_bad_mask_gets_error():
    _, _, hub = setup()
    c = hub.open()
    out = talk(hub, c, wire.Hello(Role.PERSISTENT, 4, 0x80, "g"))
    assert out[0].code == ErrorCode.BAD_MASK and c.closing


def test_bad_ack_gets_error_and_requeue():
    _, b, hub = setup()
    c = hub.open()
    talk(hub, c, wire.Hello(Role.PERSISTENT, 4, 0, "g"))
    b.ingest_all()
    hub.pump()
    out = talk(hub, c, wire.Ack(0, [99]))
    assert out[-1].code == ErrorCode.BAD_ACK
    assert len(b.groups["g"].pending[0]) == 10


def test_ack_before_hello():
    _, _, hub = setup()
    c = hub.open()
    out = talk(hub, c, wire.Ack(0, [1]))
    assert out[0].code == ErrorCode.PROTOCOL


def test_stats_without_hello():
    _, _, hub = setup()
    c = hub.open()
    (out,) = talk(hub, c, wire.StatsReq())
    assert out.text.startswith("mdt 0 position 1")


def test_fin_is_graceful():
    _, b, hub = setup()
    c = hub.open()
    talk(hub, c, wire.Hello(Role.PERSISTENT, 4, 0, "g"))
    out = talk(hub, c, wire.Fin())
    assert out == [wire.Fin()]
    assert b.groups["g"].members == {}


def test_shutdown_sends_fin():
    _, _, hub = setup()
    c = hub.open()
    talk(hub, c, wire.Hello(Role.EPHEMERAL, 1, 0, ""))
    hub.shutdown()
    assert list(FrameReader().feed(hub.take_output(c))) == [wire.Fin()]


def test_slow_listener_is_disconnected():
    j, b, hub = setup(0, eq_limit=4)
    hub.writable = lambda conn: False
    c = hub.open()
    talk(hub, c, wire.Hello(Role.EPHEMERAL, 1, 0, ""))
    for rec in Workload(3).records(10):
        j.append(rec)
    b.ingest_all()
    hub.pump()
    out = list(FrameReader().feed(hub.take_output(c)))
    assert out[-1].code == ErrorCode.SLOW_CONSUMER and c.closing
