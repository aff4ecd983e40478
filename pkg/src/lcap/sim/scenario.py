"""Deterministic in-process scenario runner.

Journals, broker and consumers run in one process on a logical clock. Each
step runs the same phases in the same order:

1. scheduled faults (member crash, member reconnect)
2. producers append to their journals
3. the broker reads what consumers sent during the previous step
4. the broker ingests one batch per MDT
5. dispatch and broadcast, frames written to consumer channels
6. upstream clear sweep, then a conservation check of broker state
7. consumers read frames, process records, send acks
8. ephemeral listeners read; scheduled ephemeral joins connect

Consumers talk to the broker through :class:`~lcap.hub.Hub` using real
frames over in-memory byte channels. Orders inside a phase come from the
scenario's seeded RNG, so a spec and seed fully determine the event log.
"""

from __future__ import annotations

import heapq
import random
import re
from collections import deque
from dataclasses import dataclass, field

from lcap import wire
from lcap.broker import Broker
from lcap.config import ConfigError, parse_bool, parse_lines
from lcap.hub import Connection, Hub
from lcap.journal import Journal
from lcap.preprocess import load_pipeline
from lcap.record import ExtMask
from lcap.sim.log import DeliveryLog
from lcap.workload import OpsMix, Workload
from lcap.wire import FrameReader, Role


class ScenarioStuck(RuntimeError):
    """The run did not reach quiescence within its step budget."""

    def __init__(self, message: str, dump: str, log: DeliveryLog):
        super().__init__(f"{message}\n{dump}")
        self.dump = dump
        self.log = log


MASK_NAMES = {"jobid": ExtMask.JOBID, "rename": ExtMask.RENAME_SOURCE,
              "rename_source": ExtMask.RENAME_SOURCE, "uidgid": ExtMask.UIDGID}


def parse_mask(text: str) -> ExtMask:
    mask = ExtMask.NONE
    for name in re.split(r"[,|\s]+", text.strip().lower()):
        if not name or name == "none":
            continue
        if name not in MASK_NAMES:
            raise ValueError(f"unknown field {name!r}")
        mask |= MASK_NAMES[name]
    return mask


@dataclass
class MdtSpec:
    mdt_id: int
    records: int
    rate: int = 100
    burst_every: int = 0
    burst_size: int = 0
    start: int = 0

    def due(self, step: int) -> int:
        """Records to append at ``step``."""
        if step < self.start:
            return 0
        n = self.rate
        if self.burst_every and (step - self.start) % self.burst_every == 0:
            n += self.burst_size
        return n


@dataclass
class GroupSpec:
    name: str
    members: int = 1
    windows: list[int] = field(default_factory=lambda: [16])
    mask: ExtMask = ExtMask.NONE
    delay: tuple[int, int] = (0, 0)

    def window(self, slot: int) -> int:
        return self.windows[slot % len(self.windows)]


@dataclass
class EphemeralSpec:
    name: str
    join: int
    drain: int = 64
    mask: ExtMask = ExtMask.NONE


@dataclass
class FaultSpec:
    step: int
    kind: str
    group: str
    member: int = 0


@dataclass
class ScenarioSpec:
    seed: int = 0
    mdts: list[MdtSpec] = field(default_factory=list)
    groups: list[GroupSpec] = field(default_factory=list)
    ephemerals: list[EphemeralSpec] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    pipeline: list[str] = field(default_factory=list)
    ops_mix: OpsMix | None = None
    jobid_pool: int = 4
    hwm: int = 1024
    batch: int = 64
    eq_limit: int = 1024
    auto_ack_no_groups: bool = False
    ack_batch: int = 8
    rx_limit: int = 64
    grace: int = 10_000
    max_steps: int = 1_000_000

    @property
    def equal_speed(self) -> bool:
        return all(len(set(g.windows[:max(g.members, 1)])) <= 1 and g.delay[0] == g.delay[1]
                   for g in self.groups)

    @classmethod
    def parse(cls, text: str, origin: str = "<scenario>") -> ScenarioSpec:
        """Read the ``key = value`` scenario format, see README."""
        spec = cls()
        mdts: dict[str, dict] = {}
        groups: dict[str, dict] = {}
        ephs: dict[str, dict] = {}
        faults: dict[str, dict] = {}
        stanzas = {"mdt": mdts, "group": groups, "ephemeral": ephs, "fault": faults}
        scalars = {"seed", "jobid_pool", "hwm", "batch", "eq_limit", "ack_batch",
                   "rx_limit", "grace", "max_steps"}
        for lineno, key, value in parse_lines(text, origin):
            where = f"{origin}:{lineno}"
            try:
                if m := re.fullmatch(r"(mdt|group|ephemeral|fault)\.([^.]+)\.(\w+)", key):
                    stanzas[m[1]].setdefault(m[2], {})[m[3]] = value
                elif key in scalars:
                    setattr(spec, key, int(value))
                elif key == "pipeline":
                    spec.pipeline = load_pipeline(value.split(","))
                elif key == "ops_mix":
                    spec.ops_mix = OpsMix.parse(value)
                elif key == "auto_ack_no_groups":
                    spec.auto_ack_no_groups = parse_bool(value)
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
        try:
            for name, d in mdts.items():
                spec.mdts.append(MdtSpec(
                    int(d.pop("mdt_id", name)), int(d.pop("records")),
                    **{k: int(v) for k, v in d.items()}))
            for name, d in groups.items():
                g = GroupSpec(name)
                if "members" in d:
                    g.members = int(d["members"])
                if "windows" in d:
                    g.windows = [int(w) for w in d["windows"].split(",")]
                if "window" in d:
                    g.windows = [int(d["window"])]
                if "mask" in d:
                    g.mask = parse_mask(d["mask"])
                if "delay" in d:
                    lo, _, hi = d["delay"].partition("-")
                    g.delay = (int(lo), int(hi or lo))
                spec.groups.append(g)
            for name, d in ephs.items():
                spec.ephemerals.append(EphemeralSpec(
                    name, int(d["join"]), int(d.get("drain", 64)), parse_mask(d.get("mask", ""))))
            for name, d in faults.items():
                kind = d["kind"]
                if kind not in ("crash", "reconnect"):
                    raise ValueError(f"fault.{name}: kind must be crash or reconnect")
                spec.faults.append(FaultSpec(int(d["step"]), kind, d["group"], int(d.get("member", 0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{origin}: incomplete or bad stanza: {exc}") from None
        spec.faults.sort(key=lambda f: f.step)
        return spec


class _Member:
    """A persistent group member speaking the wire protocol."""

    def __init__(self, run: _Run, gspec: GroupSpec, slot: int):
        self.run = run
        self.gspec = gspec
        self.slot = slot
        self.window = gspec.window(slot)
        self.conn = run.hub.open()
        self.reader = FrameReader()
        self.outbox = bytearray()
        self.consumer_id = 0
        self.alive = True
        # (ready_step, seq, (mdt, index)); each record has its own latency
        self.inbox: list = []
        self._seq = 0
        self.acks: dict[int, list[int]] = {}
        self.nacks = 0
        self.outbox += wire.frame_encode(wire.Hello(Role.PERSISTENT, self.window, gspec.mask, gspec.name))

    def step(self, now: int) -> None:
        run = self.run
        data = run.hub.take_output(self.conn)
        for m in self.reader.feed(data):
            if isinstance(m, wire.HelloAck):
                self.consumer_id = m.consumer_id
            elif isinstance(m, wire.Recs):
                for rec in m.records:
                    run.log.add("delivered", consumer=self.consumer_id, group=self.gspec.name,
                                mdt=m.mdt_id, index=rec.index)
                    if rec.ext_mask != self.gspec.mask:
                        run.log.add("mask-violation", consumer=self.consumer_id,
                                    mdt=m.mdt_id, index=rec.index)
                    lo, hi = self.gspec.delay
                    ready = now + (run.rng.randint(lo, hi) if hi else 0)
                    heapq.heappush(self.inbox, (ready, self._seq, (m.mdt_id, rec.index)))
                    self._seq += 1
            elif isinstance(m, wire.Error):
                run.log.add("fault", consumer=self.consumer_id, group=self.gspec.name,
                            data=f"error {m.code}: {m.message}")
                self.alive = False
                run.hub.close(self.conn, crash=True)
                return
        while self.inbox and self.inbox[0][0] <= now:
            self._done(heapq.heappop(self.inbox)[2])
        # never hold back more acks than the window allows, or the member stalls
        if self.nacks and (self.nacks >= min(run.spec.ack_batch, self.window) or
                           not self.inbox):
            for mdt, indices in self.acks.items():
                if indices:
                    self.outbox += wire.frame_encode(wire.Ack(mdt, indices))
            self.acks = {}
            self.nacks = 0

    def _done(self, item) -> None:
        mdt, index = item
        self.acks.setdefault(mdt, []).append(index)
        self.nacks += 1

    @property
    def idle(self) -> bool:
        return (not self.inbox and not self.nacks
                and not self.outbox and not self.conn.out)


class _Listener:
    """An ephemeral consumer reading at most ``drain`` records per step."""

    def __init__(self, run: _Run, espec: EphemeralSpec):
        self.run = run
        self.espec = espec
        self.conn = run.hub.open()
        self.reader = FrameReader()
        self.outbox = bytearray(wire.frame_encode(wire.Hello(Role.EPHEMERAL, 1, espec.mask, "")))
        self.consumer_id = 0
        self.alive = True
        self.unread: deque = deque()

    def step(self, now: int) -> None:
        if not self.alive:
            return
        run = self.run
        for m in self.reader.feed(run.hub.take_output(self.conn)):
            if isinstance(m, wire.HelloAck):
                self.consumer_id = m.consumer_id
            elif isinstance(m, wire.Recs):
                for rec in m.records:
                    run.log.add("ephemeral-delivered", consumer=self.consumer_id,
                                mdt=m.mdt_id, index=rec.index)
                    if rec.ext_mask != self.espec.mask:
                        run.log.add("mask-violation", consumer=self.consumer_id,
                                    mdt=m.mdt_id, index=rec.index)
                    self.unread.append(rec)
            elif isinstance(m, wire.Error):
                run.log.add("fault", consumer=self.consumer_id, data=f"error {m.code}: {m.message}")
                self.alive = False
                run.hub.close(self.conn, crash=True)
                return
        for _ in range(min(self.espec.drain, len(self.unread))):
            self.unread.popleft()


class _Run:
    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.log = DeliveryLog()
        self.journals = {m.mdt_id: Journal(m.mdt_id, clock=self._clock) for m in spec.mdts}
        self.workloads = {m.mdt_id: Workload(spec.seed * 1000 + m.mdt_id, spec.ops_mix,
                                             mdt_id=m.mdt_id, jobid_pool=spec.jobid_pool)
                          for m in spec.mdts}
        self.appended = {m.mdt_id: 0 for m in spec.mdts}
        self.broker = Broker(self.journals.values(), hwm=spec.hwm, batch=spec.batch,
                             eq_limit=spec.eq_limit, auto_ack_no_groups=spec.auto_ack_no_groups,
                             pipeline=spec.pipeline, on_event=self._on_event)
        self.listener_of: dict[int, _Listener] = {}
        self.hub = Hub(self.broker, writable=self._writable)
        self.members: dict[str, list[_Member | None]] = {}
        self.listeners: list[_Listener] = []
        self.joins = deque(sorted(spec.ephemerals, key=lambda e: e.join))
        self.pending_faults = deque(spec.faults)

    def _clock(self) -> int:
        return 1_000_000_000 * (self.log.step + 1)

    def _on_event(self, kind: str, **fields) -> None:
        self.log.add(kind, **fields)

    def _writable(self, conn: Connection) -> bool:
        lst = self.listener_of.get(conn.conn_id)
        if lst is None:
            return True
        return not conn.out and len(lst.unread) < self.spec.rx_limit

    def live_members(self) -> list[_Member]:
        return [m for slots in self.members.values() for m in slots if m is not None and m.alive]

    def start(self) -> None:
        for g in self.spec.groups:
            self.members[g.name] = [_Member(self, g, slot) for slot in range(g.members)]

    def fault(self, f: FaultSpec) -> None:
        slots = self.members.get(f.group)
        if slots is None or not 0 <= f.member < len(slots):
            raise ValueError(f"fault targets unknown member {f.group}[{f.member}]")
        m = slots[f.member]
        self.log.add("fault", consumer=m.consumer_id if m else 0, group=f.group,
                     data=f"{f.kind} member {f.member}")
        if f.kind == "crash":
            if m is not None and m.alive:
                m.alive = False
                self.hub.close(m.conn, crash=True)
        elif m is None or not m.alive:
            gspec = next(g for g in self.spec.groups if g.name == f.group)
            slots[f.member] = _Member(self, gspec, f.member)

    def produce(self, step: int) -> None:
        for ms in self.spec.mdts:
            n = min(ms.due(step), ms.records - self.appended[ms.mdt_id])
            j = self.journals[ms.mdt_id]
            w = self.workloads[ms.mdt_id]
            for _ in range(n):
                index = j.append(w.next_record())
                self.log.add("appended", mdt=ms.mdt_id, index=index)
            self.appended[ms.mdt_id] += n

    def deliver_inbound(self) -> None:
        senders = [m for m in self.live_members() if m.outbox]
        senders += [lst for lst in self.listeners if lst.alive and lst.outbox]
        self.rng.shuffle(senders)
        for s in senders:
            data = bytes(s.outbox)
            s.outbox.clear()
            self.hub.receive(s.conn, data)

    def step(self, step: int) -> None:
        self.log.step = step
        while self.pending_faults and self.pending_faults[0].step <= step:
            self.fault(self.pending_faults.popleft())
        self.produce(step)
        self.deliver_inbound()
        mdts = list(self.journals)
        self.rng.shuffle(mdts)
        for m in mdts:
            self.broker.ingest_tick(m)
        self.hub.pump()
        self.broker.upstream_ack()
        for problem in self.broker.check_conservation():
            self.log.add("conservation-violation", data=problem)
        members = self.live_members()
        self.rng.shuffle(members)
        for m in members:
            m.step(step)
        for lst in self.listeners:
            lst.step(step)
        while self.joins and self.joins[0].join <= step:
            lst = _Listener(self, self.joins.popleft())
            self.listeners.append(lst)
            self.listener_of[lst.conn.conn_id] = lst

    def quiescent(self) -> bool:
        if self.pending_faults or self.joins:
            return False
        for ms in self.spec.mdts:
            if self.appended[ms.mdt_id] < ms.records:
                return False
        b = self.broker
        for m, src in b.sources.items():
            last = src.journal.last_index
            if src.upstream_position <= last:
                return False
            for g in b.groups.values():
                if g.trackers[m].prefix < last or g.pending[m]:
                    return False
            if (b.groups or b.auto_ack_no_groups) and src.cleared < last:
                return False
        return all(m.idle for m in self.live_members())

    def stuck_dump(self) -> str:
        lines = [self.broker.stats_text().rstrip()]
        for name, slots in self.members.items():
            for m in slots:
                if m is None:
                    continue
                lines.append(f"member {name}[{m.slot}] id={m.consumer_id} alive={m.alive} "
                             f"inbox={len(m.inbox)} acks={m.nacks}")
        return "\n".join(lines)


def run_scenario(spec: ScenarioSpec) -> DeliveryLog:
    """Run ``spec`` to quiescence and return its event log.

    Raises :class:`ScenarioStuck` when, past the last scheduled fault, join
    or append, ``grace`` steps go by without a single new event, or when
    ``max_steps`` is reached.
    """
    run = _Run(spec)
    run.start()
    last_scheduled = max([f.step for f in spec.faults] + [e.join for e in spec.ephemerals]
                         + [_last_append_step(m) for m in spec.mdts] + [0])
    step = 0
    seen, progress = 0, 0
    while True:
        run.step(step)
        if run.quiescent():
            return run.log
        if len(run.log) != seen:
            seen, progress = len(run.log), step
        if step >= spec.max_steps or (step > last_scheduled and step - progress >= spec.grace):
            raise ScenarioStuck(f"no quiescence after {step} steps", run.stuck_dump(), run.log)
        step += 1


def _last_append_step(m: MdtSpec) -> int:
    done, step = 0, m.start
    if m.records == 0:
        return 0
    while True:
        done += m.due(step)
        if done >= m.records or step > m.start + m.records:
            return step
        step += 1
