import random

import pytest

from lcap.record import ChangelogRecord, Fid, OpCode, RenameSource

NAME_BYTES = bytes(b for b in range(1, 256) if b != ord("/"))


def rand_fid(rng):
    return Fid(rng.getrandbits(64), rng.getrandbits(32), rng.getrandbits(32))


def rand_name(rng, hi=255):
    return bytes(rng.choice(NAME_BYTES) for _ in range(rng.randint(0, hi)))


def rand_record(rng, mask=None, index=None):
    """Any valid record; ``mask`` picks the extensions, random if None."""
    if mask is None:
        mask = rng.randrange(8)
    jobid = rename = uid_gid = None
    if mask & 1:
        jobid = bytes(rng.choice(NAME_BYTES) for _ in range(rng.randint(0, 32)))
    if mask & 2:
        rename = RenameSource(rand_fid(rng), rand_fid(rng), rand_name(rng, 40))
    if mask & 4:
        uid_gid = (rng.getrandbits(32), rng.getrandbits(32))
    return ChangelogRecord(
        index if index is not None else rng.randint(1, 2**64 - 1),
        OpCode(rng.randrange(12)), rng.getrandbits(64), rand_fid(rng), rand_fid(rng),
        rand_name(rng, 40), jobid, rename, uid_gid)


@pytest.fixture
def rng():
    return random.Random(1234)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        name = nodeid.split("::")[-1][len("test_criterion_"):]
        number, _, title = name.partition("_")
        verdict = "PASS" if _ACCEPTANCE[nodeid] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {int(number):2d} {title:<28} {verdict}")
