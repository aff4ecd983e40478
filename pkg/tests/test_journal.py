import os
import random
import signal
import subprocess
import sys
import textwrap

import pytest

from lcap.journal import (DuplicateReader, FileJournal, Journal, JournalClosed, JournalError,
                          JournalLocked, UnknownReader, _parse_meta)
from lcap.record import ChangelogRecord, Fid, OpCode
from lcap.workload import Workload

from oracles import RetentionOracle, retention_ops


def rec(i=0, name=b"x"):
    return ChangelogRecord(0, OpCode.CREAT, 1, Fid(1, i + 1), Fid(1, 0), name)


def filled(n, cls=Journal, **kw):
    j = cls(**kw) if cls is Journal else cls
    for i in range(n):
        j.append(rec(i))
    return j


def test_register_on_empty_journal():
    j = Journal()
    assert j.register("cl1") == "cl1"
    assert j.readers["cl1"] == 0
    with pytest.raises(DuplicateReader):
        j.register("cl1")


def test_register_after_purge_starts_at_floor():
    j = filled(10)
    j.register("a")
    j.clear("a", 4)
    assert j.first_index == 5
    j.register("cl2")
    assert j.readers["cl2"] == 4


def test_deregister_sole_reader_purges_all():
    j = filled(10)
    j.register("a")
    j.clear("a", 3)
    j.deregister("a")
    assert list(j.records()) == []
    assert j.first_index == 11


def test_deregister_releases_retention():
    j = filled(10)
    j.register("a")
    j.register("b")
    j.clear("a", 3)
    j.clear("b", 7)
    assert j.first_index == 4
    j.deregister("a")
    assert j.first_index == 8
    with pytest.raises(UnknownReader):
        j.deregister("zz")


def test_append_indices():
    j = Journal()
    assert j.append(rec()) == 1
    assert j.append(rec()) == 2
    assert j.read(2).index == 2


def test_append_fills_time_from_clock():
    j = Journal(clock=lambda: 42)
    j.append(rec().replace(time_ns=0))
    j.append(rec().replace(time_ns=7))
    assert [r.time_ns for r in j.records()] == [42, 7]


def test_start_positions():
    j = filled(100)
    j.register("a")
    assert j.start("a", 1).position == 1
    assert j.start("a", 200).position == 101
    j.clear("a", 49)
    assert j.start("a", 0).position == 50
    with pytest.raises(UnknownReader):
        j.start("nobody", 1)


def test_recv_advances_and_ends():
    j = filled(10)
    j.register("a")
    c = j.start("a", 5)
    assert c.recv().index == 5
    assert c.position == 6
    c = j.start("a", 11)
    assert c.recv() is None


def test_drain_is_ordered_without_gaps():
    rng = random.Random(5)
    for _ in range(20):
        n = rng.randint(1, 200)
        j = filled(n)
        j.register("a")
        assert [r.index for r in j.start("a", 1)] == list(range(1, n + 1))


def test_clear_rules():
    j = filled(10)
    j.register("A")
    j.register("B")
    j.clear("A", 10 - 1)
    j.clear("A", 10)
    assert j.first_index == 1
    j.clear("B", 7)
    assert j.first_index == 8
    j.clear("A", 5)
    assert j.readers["A"] == 10
    with pytest.raises(JournalError):
        j.clear("A", 11)
    with pytest.raises(UnknownReader):
        j.clear("C", 1)


def test_closed_journal():
    j = filled(2)
    j.register("a")
    c = j.start("a")
    j.close()
    with pytest.raises(JournalClosed):
        c.recv()
    with pytest.raises(JournalClosed):
        j.append(rec())


def test_retention_matches_oracle_in_memory():
    rng = random.Random(11)
    for _ in range(50):
        j = filled(200)
        o = RetentionOracle(200)
        for _ in retention_ops(rng, j, o, 30):
            assert {r.index for r in j.records()} == o.retained
            assert j.readers == o.readers


# file-backed journal

def test_file_journal_persists(tmp_path):
    j = FileJournal.create(tmp_path, 3, writer=True)
    for i in range(5):
        j.append(rec(i))
    j.register("a")
    j.clear("a", 2)
    j.close()
    r = FileJournal(tmp_path)
    assert r.mdt_id == 3
    assert r.first_index == 3 and r.next_index == 6
    assert r.readers == {"a": 2}
    assert [x.index for x in r.records()] == [3, 4, 5]


def test_meta_layout(tmp_path):
    j = FileJournal.create(tmp_path, 9, writer=True)
    j.append(rec())
    j.register("rbh")
    j.close()
    data = (tmp_path / "meta").read_bytes()
    assert data[:4] == b"LCJM"
    assert _parse_meta(data) == (9, 1, {"rbh": 0})
    seg = (tmp_path / ("seg-" + "1".zfill(20) + ".log")).read_bytes()
    assert seg[:4] == b"LCJL"


def test_segments_roll_and_purge(tmp_path):
    j = FileJournal.create(tmp_path, 0, writer=True, segment_size=1024, fsync=False)
    for i in range(200):
        j.append(rec(i, b"n" * 20))
    segs = sorted(tmp_path.glob("seg-*.log"))
    assert len(segs) > 3
    j.register("a")
    j.clear("a", 150)
    left = sorted(tmp_path.glob("seg-*.log"))
    assert len(left) < len(segs)
    assert j.first_index == 151
    assert [r.index for r in j.records()] == list(range(151, 201))
    j.clear("a", 200)
    # the newest segment survives even when fully cleared
    assert len(list(tmp_path.glob("seg-*.log"))) == 1
    assert j.append(rec()) == 201
    j.close()
    r = FileJournal(tmp_path)
    assert [x.index for x in r.records()] == [201]


def test_reader_sees_writer_appends(tmp_path):
    w = FileJournal.create(tmp_path, 0, writer=True, segment_size=2048, fsync=False)
    r = FileJournal(tmp_path)
    r.register("a")
    c = r.start("a", 1)
    assert c.recv() is None
    for i in range(100):
        w.append(rec(i))
    assert [x.index for x in c] == list(range(1, 101))
    w.close()
    r.close()


def test_second_writer_is_locked(tmp_path):
    w = FileJournal.create(tmp_path, 0, writer=True)
    with pytest.raises(JournalLocked):
        FileJournal(tmp_path, writer=True)
    w.close()
    FileJournal(tmp_path, writer=True).close()


def test_torn_tail_is_repaired(tmp_path):
    w = FileJournal.create(tmp_path, 0, writer=True)
    for i in range(3):
        w.append(rec(i))
    w.close()
    seg = sorted(tmp_path.glob("seg-*.log"))[-1]
    with open(seg, "ab") as f:
        f.write(b"\x50\x00\x00\x00\x01garbage")
    r = FileJournal(tmp_path)
    assert r.last_index == 3
    w = FileJournal(tmp_path, writer=True)
    assert w.append(rec()) == 4
    w.close()
    assert [x.index for x in FileJournal(tmp_path).records()] == [1, 2, 3, 4]


def test_retention_matches_oracle_on_disk(tmp_path):
    rng = random.Random(3)
    for k in range(5):
        path = tmp_path / str(k)
        j = FileJournal.create(path, 0, writer=True, segment_size=512, fsync=False)
        for i in range(100):
            j.append(rec(i))
        o = RetentionOracle(100)
        for _ in retention_ops(rng, j, o, 25):
            assert {r.index for r in j.records()} == o.retained
        j.close()
        again = FileJournal(path)
        assert {r.index for r in again.records()} == o.retained
        assert again.readers == o.readers


CHILD = textwrap.dedent("""
    import sys
    from lcap.journal import FileJournal
    from lcap.workload import Workload
    j = FileJournal.create(sys.argv[1], 0, writer=True, segment_size=4096)
    w = Workload(1)
    while True:
        i = j.append(w.next_record())
        print(i, flush=True)
""")


def test_kill_and_reopen(tmp_path):
    proc = subprocess.Popen([sys.executable, "-c", CHILD, str(tmp_path)],
                            stdout=subprocess.PIPE, text=True)
    acknowledged = 0
    for line in proc.stdout:
        acknowledged = int(line)
        if acknowledged >= 300:
            break
    os.kill(proc.pid, signal.SIGKILL)
    proc.wait()
    proc.stdout.close()
    j = FileJournal(tmp_path, writer=True)
    assert j.last_index >= acknowledged
    expected = list(Workload(1).records(j.last_index, start_index=1))
    assert list(j.records()) == expected
    assert j.append(rec()) == j.last_index
    j.close()
