"""Totally ordered event log of a simulated run."""

from __future__ import annotations

import hashlib
from collections import Counter
from typing import Any, Iterator, NamedTuple

# Event kinds, in rough pipeline order. Broker-side events come from
# Broker.on_event, the others from the harness.
KINDS = (
    "appended", "ingested", "dropped", "group-created", "group-removed", "joined",
    "ephemeral-joined", "assigned", "redelivered", "delivered", "acked", "requeued",
    "left", "evicted", "cleared", "ephemeral-delivered", "fault",
    "conservation-violation", "mask-violation",
)


class Event(NamedTuple):
    seq: int
    step: int
    kind: str
    consumer: int = 0
    group: str = ""
    mdt: int = 0
    index: int = 0
    data: Any = None

    def __str__(self) -> str:
        parts = [f"#{self.seq}", f"t={self.step}", self.kind]
        if self.consumer:
            parts.append(f"c={self.consumer}")
        if self.group:
            parts.append(f"g={self.group}")
        if self.kind not in ("group-created", "joined", "ephemeral-joined", "left", "fault"):
            parts.append(f"{self.mdt}:{self.index}")
        if self.data is not None:
            parts.append(repr(self.data))
        return " ".join(parts)


class DeliveryLog:
    def __init__(self):
        self.events: list[Event] = []
        self.step = 0

    def add(self, kind: str, **fields) -> Event:
        ev = Event(len(self.events), self.step, kind, **fields)
        self.events.append(ev)
        return ev

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]

    def counts(self) -> Counter:
        return Counter(e.kind for e in self.events)

    def digest(self) -> str:
        """Order-sensitive fingerprint, for determinism checks."""
        h = hashlib.sha256()
        for ev in self.events:
            h.update(str(ev).encode())
            h.update(b"\n")
        return h.hexdigest()

    def dump(self, path) -> None:
        with open(path, "w") as f:
            for ev in self.events:
                f.write(f"{ev}\n")
