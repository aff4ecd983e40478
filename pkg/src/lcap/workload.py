"""Synthetic, internally consistent metadata workloads.

The generator keeps a small model of the namespace it is building so every
record it emits is valid: unlinks target live files, rmdirs target empty
directories, renames move existing files. Output depends only on the seed.
"""

from __future__ import annotations

import random
import string
from typing import Iterator

from lcap.record import ZERO_FID, ChangelogRecord, Fid, OpCode, RenameSource

ROOT_FID = Fid(0x200000007, 0x1, 0x0)
FID_SEQ_BASE = 0x200000400

DEFAULT_MIX = {
    OpCode.CREAT: 30, OpCode.MKDIR: 8, OpCode.HLINK: 3, OpCode.SLINK: 3,
    OpCode.MKNOD: 1, OpCode.UNLINK: 20, OpCode.RMDIR: 4, OpCode.RENAME: 5,
    OpCode.SATTR: 12, OpCode.XATTR: 4, OpCode.CLOSE: 9, OpCode.MARK: 1,
}

_NAME_CHARS = (string.ascii_letters + string.digits + "._-").encode()


class OpsMix(dict):
    """Relative weight of each opcode."""

    @classmethod
    def parse(cls, spec: str) -> OpsMix:
        """Parse ``CREAT=5,UNLINK=2``; unlisted opcodes get weight 0."""
        mix = cls()
        for item in spec.split(","):
            item = item.strip()
            if not item:
                continue
            name, sep, weight = item.partition("=")
            try:
                op = OpCode[name.strip().upper()]
                w = int(weight) if sep else 1
            except (KeyError, ValueError):
                raise ValueError(f"bad ops-mix entry {item!r}") from None
            if w < 0:
                raise ValueError(f"negative weight for {op.name}")
            mix[op] = w
        if not any(mix.values()):
            raise ValueError("ops mix needs at least one positive weight")
        return mix

    @classmethod
    def default(cls) -> OpsMix:
        return cls(DEFAULT_MIX)


class _Bag:
    """Set with O(1) add, remove and uniform random choice."""

    def __init__(self):
        self._items: list = []
        self._pos: dict = {}

    def add(self, item) -> None:
        if item not in self._pos:
            self._pos[item] = len(self._items)
            self._items.append(item)

    def remove(self, item) -> None:
        pos = self._pos.pop(item)
        last = self._items.pop()
        if pos < len(self._items):
            self._items[pos] = last
            self._pos[last] = pos

    def choice(self, rng: random.Random):
        return self._items[rng.randrange(len(self._items))]

    def __contains__(self, item) -> bool:
        return item in self._pos

    def __len__(self) -> int:
        return len(self._items)


class Workload:
    """Seeded stream of valid records, all with ``index`` 0 until appended."""

    def __init__(self, seed: int, mix: OpsMix | None = None, *, mdt_id: int = 0,
                 jobid_pool: int = 0, uidgid: bool = True, root: Fid = ROOT_FID,
                 time_base: int = 1_400_000_000_000_000_000, time_step: int = 1000):
        self.rng = random.Random(seed)
        mix = mix or OpsMix.default()
        self.ops = [op for op, w in mix.items() if w > 0]
        self.weights = [mix[op] for op in self.ops]
        self.jobid_pool = jobid_pool
        self.uidgid = uidgid
        self.root = root
        self.seq = FID_SEQ_BASE + mdt_id
        self.time_ns = time_base
        self.time_step = time_step
        self._oid = 0
        self._count = 0
        self.links: dict[Fid, list[tuple[Fid, bytes]]] = {root: []}
        self.children: dict[Fid, int] = {root: 0}
        self.dirs = _Bag()
        self.dirs.add(root)
        self.empty_dirs = _Bag()
        self.files = _Bag()
        self.used: set[tuple[Fid, bytes]] = set()

    def _new_fid(self) -> Fid:
        self._oid += 1
        return Fid(self.seq, self._oid, 0)

    def _name(self, parent: Fid) -> bytes:
        while True:
            n = self.rng.randint(1, 16)
            name = bytes(self.rng.choice(_NAME_CHARS) for _ in range(n))
            if (parent, name) not in self.used:
                return name

    def _link(self, fid: Fid, parent: Fid, name: bytes) -> None:
        self.used.add((parent, name))
        self.links[fid].append((parent, name))
        self.children[parent] += 1
        if parent in self.empty_dirs:
            self.empty_dirs.remove(parent)

    def _unlink(self, fid: Fid, link: tuple[Fid, bytes]) -> None:
        self.used.discard(link)
        self.links[fid].remove(link)
        parent = link[0]
        self.children[parent] -= 1
        if self.children[parent] == 0 and parent != self.root:
            self.empty_dirs.add(parent)

    def _pick_op(self) -> OpCode:
        op = self.rng.choices(self.ops, self.weights)[0]
        if op in (OpCode.UNLINK, OpCode.HLINK, OpCode.RENAME) and not self.files:
            return OpCode.CREAT
        if op is OpCode.RMDIR and not self.empty_dirs:
            return OpCode.MKDIR
        if op in (OpCode.SATTR, OpCode.XATTR, OpCode.CLOSE) and not (self.files or len(self.dirs) > 1):
            return OpCode.CREAT
        return op

    def _any_object(self) -> Fid:
        if self.files and (len(self.dirs) == 1 or self.rng.random() < 0.75):
            return self.files.choice(self.rng)
        while True:
            d = self.dirs.choice(self.rng)
            if d != self.root:
                return d

    def next_record(self) -> ChangelogRecord:
        rng = self.rng
        op = self._pick_op()
        target = parent = ZERO_FID
        name = b""
        rename = None
        if op in (OpCode.CREAT, OpCode.MKDIR, OpCode.SLINK, OpCode.MKNOD):
            target, parent = self._new_fid(), self.dirs.choice(rng)
            name = self._name(parent)
            self.links[target] = []
            self._link(target, parent, name)
            if op is OpCode.MKDIR:
                self.children[target] = 0
                self.dirs.add(target)
                self.empty_dirs.add(target)
            else:
                self.files.add(target)
        elif op is OpCode.HLINK:
            target, parent = self.files.choice(rng), self.dirs.choice(rng)
            name = self._name(parent)
            self._link(target, parent, name)
        elif op is OpCode.UNLINK:
            target = self.files.choice(rng)
            link = rng.choice(self.links[target])
            parent, name = link
            self._unlink(target, link)
            if not self.links[target]:
                self.files.remove(target)
                del self.links[target]
        elif op is OpCode.RMDIR:
            target = self.empty_dirs.choice(rng)
            link = self.links[target][0]
            parent, name = link
            self.empty_dirs.remove(target)
            self.dirs.remove(target)
            self._unlink(target, link)
            del self.links[target], self.children[target]
        elif op is OpCode.RENAME:
            target = self.files.choice(rng)
            old = rng.choice(self.links[target])
            parent = self.dirs.choice(rng)
            name = self._name(parent)
            self._unlink(target, old)
            self._link(target, parent, name)
            rename = RenameSource(target, old[0], old[1])
        elif op in (OpCode.SATTR, OpCode.XATTR, OpCode.CLOSE):
            target = self._any_object()
            parent, name = self.links[target][0]
        jobid = None
        if self.jobid_pool:
            jobid = f"job{self._count % self.jobid_pool}".encode()
        uid_gid = (rng.randrange(1000), rng.randrange(1000)) if self.uidgid else None
        self._count += 1
        self.time_ns += self.time_step
        return ChangelogRecord(0, op, self.time_ns, target, parent, name, jobid, rename, uid_gid)

    def records(self, count: int, start_index: int | None = None) -> Iterator[ChangelogRecord]:
        """``count`` records; numbered from ``start_index`` when given."""
        for k in range(count):
            rec = self.next_record()
            if start_index is not None:
                rec = rec.replace(index=start_index + k)
            yield rec
