"""Delivery properties checked by replaying a :class:`DeliveryLog`.

Every check rebuilds what it needs from the log alone (plus the scenario
spec for applicability), independently of broker internals, so a broker bug
cannot hide itself by also corrupting the checker's view.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from typing import NamedTuple

from lcap.sim.log import DeliveryLog, Event


class PropertyResult(NamedTuple):
    name: str
    passed: bool
    witness: str = ""

    def __str__(self) -> str:
        return f"PROP {self.name} {'PASS' if self.passed else 'FAIL'} {self.witness}".rstrip()


def _ok(name: str, note: str = "") -> PropertyResult:
    return PropertyResult(name, True, note)


def _fail(name: str, *events: Event, note: str = "") -> PropertyResult:
    parts = [note] if note else []
    parts += [f"[{ev}]" for ev in events]
    return PropertyResult(name, False, " ".join(parts))


def _group_starts(log: DeliveryLog) -> dict[str, dict[int, int]]:
    """Start index per MDT of every group that was never removed."""
    starts = {}
    for ev in log.of("group-created", "group-removed"):
        if ev.kind == "group-created":
            starts[ev.group] = ev.data
        else:
            starts.pop(ev.group, None)
    return starts


def check_at_least_once(log: DeliveryLog) -> PropertyResult:
    appended = [e for e in log.of("appended")]
    dropped = {(e.mdt, e.index) for e in log.of("dropped")}
    delivered = defaultdict(set)
    acked = defaultdict(set)
    for e in log.of("delivered", "acked"):
        (delivered if e.kind == "delivered" else acked)[e.group].add((e.mdt, e.index))
    for g, start in sorted(_group_starts(log).items()):
        for e in appended:
            key = (e.mdt, e.index)
            if e.index < start.get(e.mdt, 0) or key in dropped:
                continue
            if key not in delivered[g]:
                return _fail("at_least_once", e, note=f"group {g} never received")
            if key not in acked[g]:
                return _fail("at_least_once", e, note=f"group {g} never acknowledged")
    return _ok("at_least_once")


def check_duplicates_after_crash(log: DeliveryLog) -> PropertyResult:
    """A second delivery to a group needs an earlier requeue of that record."""
    seen: Counter = Counter()
    requeued: Counter = Counter()
    for e in log.of("delivered", "requeued"):
        key = (e.group, e.mdt, e.index)
        if e.kind == "requeued":
            requeued[key] += 1
        else:
            seen[key] += 1
            if seen[key] > requeued[key] + 1:
                return _fail("duplicates_after_crash", e, note="duplicate without a crash")
    return _ok("duplicates_after_crash", f"{sum(requeued.values())} requeued")


def check_redelivery(log: DeliveryLog) -> PropertyResult:
    """Every requeued record is assigned and delivered again later."""
    waiting: dict[tuple, Event] = {}
    assigned: dict[tuple, int] = {}
    for e in log.of("requeued", "redelivered", "delivered"):
        key = (e.group, e.mdt, e.index)
        if e.kind == "requeued":
            waiting[key] = e
            assigned.pop(key, None)
        elif e.kind == "redelivered" and key in waiting:
            assigned[key] = e.consumer
        elif e.kind == "delivered" and assigned.get(key) == e.consumer:
            del waiting[key], assigned[key]
    if waiting:
        ev = min(waiting.values(), key=lambda x: x.seq)
        return _fail("redelivery_after_crash", ev, note="never redelivered")
    return _ok("redelivery_after_crash")


class _Prefix:
    """Brute-force contiguous prefix over a set, for oracle use."""

    def __init__(self, start: int):
        self.prefix = start - 1
        self.done: set[int] = set()

    def add(self, index: int) -> None:
        self.done.add(index)
        while self.prefix + 1 in self.done:
            self.prefix += 1
            self.done.discard(self.prefix)


def check_clear_safety(log: DeliveryLog, auto_ack_no_groups: bool = False) -> PropertyResult:
    """Each clear is at most the smallest group prefix at that point in the log."""
    prefixes: dict[str, dict[int, _Prefix]] = {}
    last_ack: dict[tuple[str, int], Event] = {}
    mdts: set[int] = set()
    for e in log:
        if e.kind == "appended":
            mdts.add(e.mdt)
        elif e.kind == "group-created":
            prefixes[e.group] = {m: _Prefix(s) for m, s in e.data.items()}
        elif e.kind == "group-removed":
            prefixes.pop(e.group, None)
        elif e.kind == "acked" and e.group in prefixes:
            prefixes[e.group][e.mdt].add(e.index)
            last_ack[(e.group, e.mdt)] = e
        elif e.kind == "dropped":
            for p in prefixes.values():
                p[e.mdt].add(e.index)
        elif e.kind == "cleared":
            if not prefixes:
                if not auto_ack_no_groups:
                    return _fail("clear_safety", e, note="cleared with no group")
                continue
            g, p = min(((g, p[e.mdt].prefix) for g, p in prefixes.items()), key=lambda x: x[1])
            if e.index > p:
                witness = last_ack.get((g, e.mdt))
                evs = (e, witness) if witness else (e,)
                return _fail("clear_safety", *evs,
                             note=f"cleared past group {g} prefix {p}")
    return _ok("clear_safety")


def check_window_bound(log: DeliveryLog) -> PropertyResult:
    window: dict[int, int] = {}
    flying: dict[int, set] = defaultdict(set)
    for e in log.of("joined", "assigned", "acked", "requeued", "left"):
        c = e.consumer
        if e.kind == "joined":
            window[c] = e.data
        elif e.kind == "assigned":
            flying[c].add((e.mdt, e.index))
            if len(flying[c]) > window.get(c, 0):
                return _fail("window_bound", e,
                             note=f"{len(flying[c])} in flight, window {window.get(c, 0)}")
        elif e.kind in ("acked", "requeued"):
            flying[c].discard((e.mdt, e.index))
        elif e.kind == "left":
            flying.pop(c, None)
    return _ok("window_bound")


def check_ephemeral_freshness(log: DeliveryLog) -> PropertyResult:
    snapshot: dict[int, dict[int, int]] = {}
    seen: dict[int, set] = defaultdict(set)
    n = 0
    for e in log.of("ephemeral-joined", "ephemeral-delivered"):
        if e.kind == "ephemeral-joined":
            snapshot[e.consumer] = e.data
            continue
        n += 1
        floor = snapshot.get(e.consumer, {}).get(e.mdt)
        if floor is None:
            return _fail("ephemeral_freshness", e, note="delivery to unknown listener")
        if e.index <= floor:
            return _fail("ephemeral_freshness", e, note=f"snapshot was {floor}")
        key = (e.mdt, e.index)
        if key in seen[e.consumer]:
            return _fail("ephemeral_freshness", e, note="delivered twice")
        seen[e.consumer].add(key)
    return _ok("ephemeral_freshness", f"{n} deliveries")


def check_upstream_complete(log: DeliveryLog, auto_ack_no_groups: bool = False) -> PropertyResult:
    """At the end every journal is cleared to its last index, listeners or not."""
    if not log.of("group-created") and not auto_ack_no_groups:
        return _ok("upstream_complete", "no persistent group")
    last: dict[int, int] = {}
    cleared: dict[int, int] = {}
    for e in log.of("appended", "cleared"):
        (last if e.kind == "appended" else cleared)[e.mdt] = e.index
    for m, idx in sorted(last.items()):
        if cleared.get(m, 0) != idx:
            return PropertyResult("upstream_complete", False,
                                  f"mdt {m} cleared to {cleared.get(m, 0)}, last index {idx}")
    return _ok("upstream_complete")


def check_conservation(log: DeliveryLog) -> PropertyResult:
    bad = log.of("conservation-violation")
    return _fail("conservation", bad[0]) if bad else _ok("conservation")


def check_session_mask(log: DeliveryLog) -> PropertyResult:
    bad = log.of("mask-violation")
    return _fail("session_mask", bad[0]) if bad else _ok("session_mask")


def fairness_applies(spec) -> bool:
    if spec is None or spec.faults:
        return False
    return all(len(set(g.windows[:g.members])) == 1 and g.delay == (0, 0) for g in spec.groups)


def check_fairness(log: DeliveryLog, spec=None) -> PropertyResult:
    """Per group, assignment counts of its members differ by at most one."""
    if not fairness_applies(spec):
        return _ok("fairness", "not applicable")
    counts: dict[str, Counter] = defaultdict(Counter)
    for e in log.of("joined"):
        counts[e.group][e.consumer] += 0
    for e in log.of("assigned"):
        counts[e.group][e.consumer] += 1
    for g, c in sorted(counts.items()):
        if c and max(c.values()) - min(c.values()) > 1:
            return PropertyResult("fairness", False, f"group {g} counts {dict(sorted(c.items()))}")
    summary = " ".join(f"{g}={sorted(c.values())}" for g, c in sorted(counts.items()))
    return _ok("fairness", summary)


def verify_properties(log: DeliveryLog, spec=None) -> list[PropertyResult]:
    auto = bool(spec is not None and spec.auto_ack_no_groups)
    return [
        check_at_least_once(log),
        check_duplicates_after_crash(log),
        check_redelivery(log),
        check_clear_safety(log, auto),
        check_window_bound(log),
        check_ephemeral_freshness(log),
        check_upstream_complete(log, auto),
        check_conservation(log),
        check_session_mask(log),
        check_fairness(log, spec),
    ]


def format_report(results: list[PropertyResult]) -> str:
    return "".join(f"{r}\n" for r in results)
