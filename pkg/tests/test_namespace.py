import pytest

from lcap.record import ChangelogRecord, Fid, OpCode, RenameSource
from lcap.sim.namespace import NamespaceModel, OracleError, oracle_replay
from lcap.workload import ROOT_FID, Workload

P = ROOT_FID
X = Fid(0x300, 1)


def r(i, op, target, parent=P, name=b"a", **kw):
    return ChangelogRecord(i, op, 0, target, parent, name, **kw)


def test_create_then_unlink_is_empty():
    assert oracle_replay([r(1, OpCode.CREAT, X), r(2, OpCode.UNLINK, X)]) == NamespaceModel()


def test_create_entry():
    m = oracle_replay([r(1, OpCode.CREAT, X)])
    assert m.state()[X] == (False, frozenset({(P, b"a")}), 0)


def test_unknown_fid_is_an_error():
    with pytest.raises(OracleError):
        oracle_replay([r(1, OpCode.UNLINK, X)])


def test_rmdir_non_empty():
    d = Fid(0x300, 2)
    with pytest.raises(OracleError):
        oracle_replay([r(1, OpCode.MKDIR, d), r(2, OpCode.CREAT, X, d),
                       r(3, OpCode.RMDIR, d)])


def test_rename_moves_link():
    d = Fid(0x300, 2)
    m = oracle_replay([r(1, OpCode.MKDIR, d, name=b"d"), r(2, OpCode.CREAT, X),
                       r(3, OpCode.RENAME, X, d, b"b", rename_source=RenameSource(X, P, b"a"))])
    assert m.state()[X][1] == frozenset({(d, b"b")})


def test_duplicate_name():
    with pytest.raises(OracleError):
        oracle_replay([r(1, OpCode.CREAT, X), r(2, OpCode.CREAT, Fid(0x300, 5))])


def test_workload_streams_replay_cleanly():
    for seed in range(5):
        model = oracle_replay(Workload(seed).records(5000, start_index=1))
        assert len(model) >= 1
