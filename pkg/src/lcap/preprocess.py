"""Record pre-processing modules applied to each ingested window.

A module takes the index-ordered records of one window and returns the
records to forward, in forwarding order, plus the indices it dropped.
Modules never invent records: kept and dropped always partition the input.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from lcap.record import ZERO_FID, ChangelogRecord, Fid, OpCode

__all__ = [
    "DEFAULT_MAX_SPAN",
    "PipelineWindow",
    "PipelineResult",
    "UnknownModule",
    "compensation_filter",
    "reorder_by_parent",
    "identity",
    "MODULES",
    "load_pipeline",
    "pipeline_apply",
    "touched_fids",
]

DEFAULT_MAX_SPAN = 1024

CREATE_OPS = frozenset({OpCode.CREAT, OpCode.MKDIR, OpCode.MKNOD, OpCode.SLINK})
REMOVE_OPS = frozenset({OpCode.UNLINK, OpCode.RMDIR})
LINKING_OPS = frozenset({OpCode.RENAME, OpCode.HLINK})


@dataclass
class PipelineWindow:
    mdt_id: int
    records: list[ChangelogRecord]
    max_span: int = DEFAULT_MAX_SPAN

    def __post_init__(self):
        if len(self.records) > self.max_span:
            raise ValueError(f"window of {len(self.records)} records exceeds max_span {self.max_span}")
        for a, b in zip(self.records, self.records[1:]):
            if b.index <= a.index:
                raise ValueError(f"window not index-ordered at {a.index}, {b.index}")


@dataclass
class PipelineResult:
    kept: list[ChangelogRecord]
    dropped: set[int] = field(default_factory=set)


class UnknownModule(ValueError):
    pass


def _records_of(window) -> Sequence[ChangelogRecord]:
    return window.records if isinstance(window, PipelineWindow) else window


def touched_fids(rec: ChangelogRecord) -> set[Fid]:
    """Every object a record reads or modifies, ignoring the zero FID."""
    fids = {rec.target, rec.parent}
    if rec.rename_source is not None:
        fids.add(rec.rename_source.source)
        fids.add(rec.rename_source.source_parent)
    fids.discard(ZERO_FID)
    return fids


def compensation_filter(records: Sequence[ChangelogRecord]) -> PipelineResult:
    """Drop objects created and removed inside the window.

    An object qualifies when its create and its unlink/rmdir are both in the
    window and no RENAME or HLINK touches it. All records touching it are
    dropped. A directory only qualifies if every child recorded under it
    qualifies too, otherwise the kept child records would dangle.
    """
    records = _records_of(records)
    touching: dict[Fid, list[int]] = {}
    created: dict[Fid, int] = {}
    removed: set[Fid] = set()
    linked: set[Fid] = set()
    for pos, rec in enumerate(records):
        fids = touched_fids(rec)
        for fid in fids:
            touching.setdefault(fid, []).append(pos)
        if rec.opcode in LINKING_OPS:
            linked.update(fids)
        if rec.opcode in CREATE_OPS and rec.target:
            created.setdefault(rec.target, pos)
        elif rec.opcode in REMOVE_OPS and rec.target in created:
            removed.add(rec.target)

    candidates = {fid for fid in removed if fid not in linked}
    changed = True
    while changed:
        changed = False
        for fid in list(candidates):
            for pos in touching[fid]:
                target = records[pos].target
                if target != fid and records[pos].parent == fid and target not in candidates:
                    candidates.discard(fid)
                    changed = True
                    break

    drop_pos = set()
    for fid in candidates:
        drop_pos.update(touching[fid])
    kept = [rec for pos, rec in enumerate(records) if pos not in drop_pos]
    return PipelineResult(kept, {records[pos].index for pos in drop_pos})


def _reorder_segment(records: Sequence[ChangelogRecord]) -> list[ChangelogRecord]:
    rank: dict[Fid, int] = {}
    last_touch: dict[Fid, int] = {}
    succ: list[list[int]] = [[] for _ in records]
    indeg = [0] * len(records)
    for pos, rec in enumerate(records):
        rank.setdefault(rec.parent, len(rank))
        preds = {last_touch[f] for f in touched_fids(rec) if f in last_touch}
        for p in preds:
            succ[p].append(pos)
        indeg[pos] = len(preds)
        for f in touched_fids(rec):
            last_touch[f] = pos
    ready = [(rank[rec.parent], pos) for pos, rec in enumerate(records) if indeg[pos] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        _, pos = heapq.heappop(ready)
        out.append(records[pos])
        for nxt in succ[pos]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, (rank[records[nxt].parent], nxt))
    return out


def reorder_by_parent(records: Sequence[ChangelogRecord]) -> list[ChangelogRecord]:
    """Group records by parent directory, buckets ordered by first appearance.

    Records that share any object keep their relative order, and a RENAME
    is a barrier nothing crosses, so replaying the output gives the same
    namespace as replaying the input.
    """
    records = _records_of(records)
    out: list[ChangelogRecord] = []
    segment: list[ChangelogRecord] = []
    for rec in records:
        if rec.opcode is OpCode.RENAME:
            out.extend(_reorder_segment(segment))
            out.append(rec)
            segment = []
        else:
            segment.append(rec)
    out.extend(_reorder_segment(segment))
    return out


def _reorder_module(records):
    return PipelineResult(reorder_by_parent(records))


def identity(records: Sequence[ChangelogRecord]) -> PipelineResult:
    return PipelineResult(list(records))


Module = Callable[[Sequence[ChangelogRecord]], PipelineResult]

MODULES: dict[str, Module] = {
    "compensation": compensation_filter,
    "reorder": _reorder_module,
    "identity": identity,
}


def load_pipeline(names: Iterable[str]) -> list[str]:
    names = [n.strip() for n in names if n.strip()]
    for name in names:
        if name not in MODULES:
            raise UnknownModule(f"unknown pipeline module {name!r}")
    return names


def pipeline_apply(modules: Sequence[str], window: PipelineWindow | Sequence[ChangelogRecord]
                   ) -> PipelineResult:
    records = list(_records_of(window))
    result = PipelineResult(list(records))
    for name in modules:
        try:
            module = MODULES[name]
        except KeyError:
            raise UnknownModule(f"unknown pipeline module {name!r}") from None
        step = module(result.kept)
        result = PipelineResult(step.kept, result.dropped | step.dropped)
    return result
