import pytest

from lcap.broker import BadMask, Broker, Mode, ProtocolError
from lcap.journal import Journal
from lcap.record import ChangelogRecord, ExtMask, Fid, OpCode
from lcap.workload import Workload


def journal(n, mdt=0, seed=0):
    j = Journal(mdt, clock=lambda: 1)
    for rec in Workload(seed, mdt_id=mdt, jobid_pool=3).records(n):
        j.append(rec)
    return j


def ack_all(b, deliveries):
    for d in deliveries:
        b.ack(d.consumer_id, d.mdt_id, [d.record.index])


def test_empty_journal_fetches_nothing():
    b = Broker([Journal(0)])
    b.join("g", Mode.PERSISTENT, 0, 4)
    assert b.ingest_tick(0) == 0


def test_batch_and_hwm_bound_fetch():
    b = Broker([journal(100)], hwm=64, batch=32)
    b.join("g", Mode.PERSISTENT, 0, 1)
    assert b.ingest_tick(0) == 32
    assert b.ingest_tick(0) == 32
    assert b.ingest_tick(0) == 0
    assert b.sources[0].buffered == 64


def test_backpressure_until_acks():
    b = Broker([journal(100)], hwm=10, batch=10)
    c = b.join("g", Mode.PERSISTENT, 0, 4)
    b.ingest_all()
    assert b.ingest_all() == 0
    ds = b.dispatch()
    assert len(ds) == 4
    ack_all(b, ds)
    assert b.ingest_all() == 4
    assert c.spare == 4


def test_round_robin_two_members():
    b = Broker([journal(4)])
    c1 = b.join("g", Mode.PERSISTENT, 0, 2)
    c2 = b.join("g", Mode.PERSISTENT, 0, 2)
    b.ingest_all()
    ds = b.dispatch()
    assert [d.consumer_id for d in ds] == [c1.consumer_id, c2.consumer_id] * 2
    assert [d.record.index for d in ds] == [1, 2, 3, 4]


def test_no_members_keeps_pending():
    b = Broker([journal(5)])
    c = b.join("g", Mode.PERSISTENT, 0, 2)
    b.leave(c.consumer_id)
    b.ingest_all()
    assert b.dispatch() == []
    assert len(b.groups["g"].pending[0]) == 5


def test_windows_one_and_three_instant_acks():
    b = Broker([journal(100)])
    fast = b.join("g", Mode.PERSISTENT, 0, 3)
    slow = b.join("g", Mode.PERSISTENT, 0, 1)
    b.ingest_all()
    counts = {fast.consumer_id: 0, slow.consumer_id: 0}
    seen = []
    while True:
        ds = b.dispatch()
        if not ds:
            break
        for d in ds:
            counts[d.consumer_id] += 1
            seen.append(d.record.index)
        ack_all(b, ds)
    assert sorted(seen) == list(range(1, 101))
    assert counts[fast.consumer_id] == 75 and counts[slow.consumer_id] == 25


def test_records_are_remapped_per_member():
    b = Broker([journal(6)])
    b.join("g", Mode.PERSISTENT, ExtMask.JOBID, 3)
    b.join("g", Mode.PERSISTENT, 0, 3)
    b.ingest_all()
    masks = {d.consumer_id: d.record.ext_mask for d in b.dispatch()}
    assert sorted(masks.values()) == [ExtMask.NONE, ExtMask.JOBID]
    assert b.groups["g"].requested_mask == ExtMask.JOBID


def test_ack_rules():
    b = Broker([journal(10)])
    c = b.join("g", Mode.PERSISTENT, 0, 5)
    b.ingest_all()
    ds = b.dispatch()
    b.ack(c.consumer_id, 0, [ds[0].record.index])
    assert b.groups["g"].trackers[0].prefix == 1
    b.ack(c.consumer_id, 0, [1])  # duplicate tolerated
    with pytest.raises(ProtocolError):
        b.ack(c.consumer_id, 0, [999])
    with pytest.raises(ProtocolError):
        b.ack(12345, 0, [2])


def test_bad_join():
    b = Broker([journal(1)])
    with pytest.raises(BadMask):
        b.join("g", Mode.PERSISTENT, 0x100, 1)
    with pytest.raises(ProtocolError):
        b.join("g", Mode.PERSISTENT, 0, 0)


def test_crash_requeues_in_index_order():
    b = Broker([journal(20)])
    a = b.join("g", Mode.PERSISTENT, 0, 4)
    other = b.join("g", Mode.PERSISTENT, 0, 4)
    b.ingest_all()
    ds = b.dispatch()
    held = sorted(d.record.index for d in ds if d.consumer_id == a.consumer_id)
    b.leave(a.consumer_id, crash=True)
    pending = [r.index for r in b.groups["g"].pending[0]]
    assert pending[:len(held)] == held
    ack_all(b, [d for d in ds if d.consumer_id == other.consumer_id])
    redelivered = [d.record.index for d in b.dispatch()]
    assert redelivered == held


def test_clear_is_min_over_groups():
    b = Broker([journal(10)])
    a = b.join("A", Mode.PERSISTENT, 0, 10)
    c = b.join("B", Mode.PERSISTENT, 0, 10)
    b.ingest_all()
    ds = b.dispatch()
    for d in ds:
        if d.consumer_id == a.consumer_id and d.record.index <= 3:
            b.ack(a.consumer_id, 0, [d.record.index])
        if d.consumer_id == c.consumer_id and d.record.index <= 7:
            b.ack(c.consumer_id, 0, [d.record.index])
    assert b.upstream_ack() == {0: 3}
    assert b.sources[0].journal.readers["lcap"] == 3
    b.remove_group("A")
    assert b.upstream_ack() == {0: 7}


def test_no_clear_without_acks_or_groups():
    b = Broker([journal(10)])
    b.ingest_all()
    assert b.upstream_ack() == {}
    b.join("g", Mode.PERSISTENT, 0, 1)
    assert b.upstream_ack() == {}


def test_auto_ack_without_groups():
    b = Broker([journal(10)], auto_ack_no_groups=True)
    b.ingest_all()
    assert b.upstream_ack() == {0: 10}


def test_first_group_sees_records_read_before_it_joined():
    b = Broker([journal(10)])
    b.ingest_all()
    c = b.join("late", Mode.PERSISTENT, 0, 20)
    assert [d.record.index for d in b.dispatch()] == list(range(1, 11))
    assert c.spare == 10


def test_second_group_starts_at_current_position():
    b = Broker([journal(10)])
    b.join("g", Mode.PERSISTENT, 0, 20)
    b.ingest_all()
    b.join("h", Mode.PERSISTENT, 0, 20)
    assert b.groups["h"].start == {0: 11}


def test_dropped_records_are_auto_acked():
    j = Journal(0)
    x = Fid(5, 1)
    j.append(ChangelogRecord(0, OpCode.CREAT, 1, x, Fid(5, 0), b"a"))
    j.append(ChangelogRecord(0, OpCode.UNLINK, 1, x, Fid(5, 0), b"a"))
    b = Broker([j], pipeline=["compensation"])
    b.join("g", Mode.PERSISTENT, 0, 1)
    b.ingest_all()
    assert b.groups["g"].trackers[0].prefix == 2
    assert b.upstream_ack() == {0: 2}


def test_ephemeral_snapshot_and_freshness():
    j = journal(500)
    b = Broker([j], auto_ack_no_groups=True)
    e = b.join(None, Mode.EPHEMERAL, 0, 1)
    assert e.snapshot == {0: 500}
    b.ingest_all()
    assert b.take_ephemeral(e.consumer_id) == []
    for rec in Workload(9).records(2):
        j.append(rec)
    b.ingest_all()
    assert [r.index for _, r in b.take_ephemeral(e.consumer_id)] == [501, 502]


def test_ephemeral_does_not_block_clearing():
    j = journal(50)
    b = Broker([j])
    c = b.join("g", Mode.PERSISTENT, 0, 100)
    b.join(None, Mode.EPHEMERAL, 0, 1)
    for rec in Workload(1).records(5):
        j.append(rec)
    b.ingest_all()
    ack_all(b, b.dispatch())
    assert b.upstream_ack() == {0: 55}
    assert c.spare == 100


def test_slow_ephemeral_is_evicted():
    j = Journal(0)
    b = Broker([j], eq_limit=8, auto_ack_no_groups=True)
    e = b.join(None, Mode.EPHEMERAL, 0, 1)
    for rec in Workload(1).records(20):
        j.append(rec)
    b.ingest_all()
    assert e.consumer_id not in b.consumers
    assert b.evicted[0][:2] == (e.consumer_id, "slow")


def test_conservation_holds_through_a_run():
    b = Broker([journal(200, 0), journal(150, 1, seed=3)], hwm=32, batch=8)
    a = b.join("g", Mode.PERSISTENT, 0, 3)
    b.join("g", Mode.PERSISTENT, 0, 5)
    for step in range(400):
        b.ingest_all()
        ds = b.dispatch()
        ack_all(b, ds[::2])
        if step == 5:
            b.leave(a.consumer_id, crash=True)
        assert b.check_conservation() == []
        b.upstream_ack()
    assert b.check_conservation() == []


def test_stats_text():
    b = Broker([journal(3)])
    b.join("g", Mode.PERSISTENT, 0, 2)
    text = b.stats_text()
    assert "mdt 0 position 1 cleared 0 head 3 buffered 0" in text
    assert "group g members 1" in text
    assert "group g mdt 0 pending 0 in_flight 0 prefix 0" in text
