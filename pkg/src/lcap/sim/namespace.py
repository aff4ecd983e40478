"""Namespace model used as a replay oracle.

Replaying a record stream into a :class:`NamespaceModel` gives the final
namespace the stream describes. Two streams are equivalent for a consumer
when their replays compare equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from lcap.record import ChangelogRecord, Fid, OpCode
from lcap.workload import ROOT_FID


class OracleError(Exception):
    """The stream is inconsistent with the namespace so far."""


@dataclass
class Entry:
    is_dir: bool
    links: set[tuple[Fid, bytes]] = field(default_factory=set)
    version: int = 0
    children: int = 0


class NamespaceModel:
    def __init__(self, root: Fid = ROOT_FID):
        self.root = root
        self.entries: dict[Fid, Entry] = {root: Entry(True)}
        self.names: set[tuple[Fid, bytes]] = set()

    def _get(self, fid: Fid, rec: ChangelogRecord) -> Entry:
        try:
            return self.entries[fid]
        except KeyError:
            raise OracleError(f"record {rec.index} {rec.opcode.name}: unknown fid {fid}") from None

    def _dir(self, fid: Fid, rec: ChangelogRecord) -> Entry:
        e = self._get(fid, rec)
        if not e.is_dir:
            raise OracleError(f"record {rec.index} {rec.opcode.name}: {fid} is not a directory")
        return e

    def _add_link(self, e: Entry, parent: Fid, name: bytes, rec: ChangelogRecord) -> None:
        pdir = self._dir(parent, rec)
        if (parent, name) in self.names:
            raise OracleError(f"record {rec.index}: name {name!r} exists in {parent}")
        self.names.add((parent, name))
        e.links.add((parent, name))
        pdir.children += 1

    def _drop_link(self, e: Entry, parent: Fid, name: bytes, rec: ChangelogRecord) -> None:
        if (parent, name) not in e.links:
            raise OracleError(f"record {rec.index} {rec.opcode.name}: no link {name!r} in {parent}")
        e.links.remove((parent, name))
        self.names.discard((parent, name))
        self.entries[parent].children -= 1

    def apply(self, rec: ChangelogRecord) -> None:
        op = rec.opcode
        if op is OpCode.MARK:
            return
        if op in (OpCode.CREAT, OpCode.MKDIR, OpCode.MKNOD, OpCode.SLINK):
            if rec.target in self.entries:
                raise OracleError(f"record {rec.index}: {rec.target} created twice")
            e = Entry(op is OpCode.MKDIR)
            self._add_link(e, rec.parent, rec.name, rec)
            self.entries[rec.target] = e
        elif op is OpCode.HLINK:
            e = self._get(rec.target, rec)
            if e.is_dir:
                raise OracleError(f"record {rec.index}: hard link to directory")
            self._add_link(e, rec.parent, rec.name, rec)
        elif op is OpCode.UNLINK:
            e = self._get(rec.target, rec)
            if e.is_dir:
                raise OracleError(f"record {rec.index}: unlink of directory")
            self._drop_link(e, rec.parent, rec.name, rec)
            if not e.links:
                del self.entries[rec.target]
        elif op is OpCode.RMDIR:
            e = self._dir(rec.target, rec)
            if e.children:
                raise OracleError(f"record {rec.index}: rmdir of non-empty {rec.target}")
            self._drop_link(e, rec.parent, rec.name, rec)
            del self.entries[rec.target]
        elif op is OpCode.RENAME:
            src = rec.rename_source
            if src is None:
                raise OracleError(f"record {rec.index}: rename without source")
            e = self._get(src.source, rec)
            self._drop_link(e, src.source_parent, src.name, rec)
            self._add_link(e, rec.parent, rec.name, rec)
        elif op in (OpCode.SATTR, OpCode.XATTR):
            self._get(rec.target, rec).version += 1
        elif op is OpCode.CLOSE:
            self._get(rec.target, rec)

    def state(self) -> dict:
        return {fid: (e.is_dir, frozenset(e.links), e.version) for fid, e in self.entries.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, NamespaceModel):
            return NotImplemented
        return self.state() == other.state()

    def __len__(self) -> int:
        return len(self.entries)


def oracle_replay(records: Iterable[ChangelogRecord], root: Fid = ROOT_FID) -> NamespaceModel:
    model = NamespaceModel(root)
    for rec in records:
        model.apply(rec)
    return model
