"""Deterministic simulator: virtual time, seeded network delays, one event per step.

A ``World`` owns the growing system state plus whatever bookkeeping the
protocol keeps.  ``step`` advances it along the seeded schedule;
``World.enabled``/``World.apply`` expose every possible next event so the
explorer in ``model`` can branch over all of them.
"""
from __future__ import annotations

import copy
import json
import os
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

from .lattice import Label, flows_to
from .model import Event, Execution, Kind, SystemState

DEFAULT_MAX_STEPS = 5000


def max_steps_default() -> int:
    raw = os.environ.get("SECTX_MAX_STEPS")
    return int(raw) if raw else DEFAULT_MAX_STEPS


class ProtocolBug(RuntimeError):
    """The protocol produced an event that breaks a simulator contract."""


class ProtocolRefused(ValueError):
    """The protocol will not schedule these transactions at all."""


@dataclass(frozen=True)
class TxnSpec:
    txn: str
    program: str
    runner: str
    start_time: int = 0
    start_id: Optional[str] = None

    @property
    def start_event(self) -> str:
        return self.start_id or f"{self.txn}:start"


@dataclass(frozen=True)
class Message:
    id: str
    src: str
    dst: str
    label: Label
    kind: str
    payload: Any
    txn: Optional[str]
    send_event: str
    sent_at: int

    @property
    def delay_event(self) -> str:
        return f"{self.id}/delay"

    @property
    def receive_event(self) -> str:
        return f"{self.id}/recv"


@dataclass(frozen=True)
class Pending:
    due: int
    order: tuple
    txn: Optional[str] = None       # start NIE
    msg: Optional[Message] = None   # delay NIE


@dataclass(frozen=True)
class Work:
    key: tuple
    kind: str
    txn: Optional[str]
    data: Any = None
    msg: Optional[Message] = None


@dataclass(frozen=True)
class NetworkPolicy:
    min_delay: int = 1
    max_delay: int = 4

    def delay(self, seed: int, msg_id: str) -> int:
        return random.Random(f"{seed}:{msg_id}").randint(self.min_delay, self.max_delay)


class World:
    def __init__(self, locations: Mapping[str, Label], protocol: Any, txns: Iterable[TxnSpec],
                 *, seed: int = 0, network: NetworkPolicy = NetworkPolicy(),
                 universe: Iterable[str] = (), context: Any = None):
        self.locations = dict(sorted(locations.items()))
        self.loc_order = list(self.locations)
        self.protocol = protocol
        self.txns = {t.txn: t for t in txns}
        self.seed = seed
        self.network = network
        self.universe = frozenset(universe)
        self.context = context          # e.g. the scenario; read-only
        self.time = 0
        self.step_no = 0
        self.cursor = 0
        self.schedule: list[Event] = []
        self.preds: dict[str, tuple[str, ...]] = {}
        self.anc: dict[str, frozenset[str]] = {}
        self.pending: dict[str, Pending] = {}
        self.work: dict[str, dict[tuple, Work]] = {l: {} for l in self.loc_order}
        self.seq: dict[str, int] = {}
        self.proto_counts: dict[str, int] = {t: 0 for t in self.txns}
        self.lock_holders: dict[str, Optional[str]] = {}
        self.trace: list[dict] = []
        self.keep_trace = True
        self._emitted: Optional[Event] = None
        self.ps: Any = None
        for t in self.txns.values():
            self.pending[f"start:{t.txn}"] = Pending(t.start_time, (0, t.txn), txn=t.txn)
        protocol.setup(self)

    # -- plumbing used by protocols --------------------------------------

    @property
    def bottom(self) -> Label:
        return Label.bottom(self.universe)

    def next_key(self, txn: Optional[str]) -> tuple:
        t = txn or "~"
        n = self.seq.get(t, 0)
        self.seq[t] = n + 1
        return (t, n)

    def add_work(self, loc: str, kind: str, txn: Optional[str], data: Any = None,
                 msg: Optional[Message] = None) -> None:
        k = self.next_key(txn)
        self.work[loc][k] = Work(k, kind, txn, data, msg)

    def emit(self, eid: str, kind: Kind, loc: str, label: Label, *, deps: Iterable[str] = (),
             txn: Optional[str] = None, proto: bool = True, **extra) -> Event:
        if self._emitted is not None:
            raise ProtocolBug(f"second event {eid} in one step (first {self._emitted.id})")
        if eid in self.preds:
            raise ProtocolBug(f"duplicate event id {eid}")
        if loc not in self.locations:
            raise ProtocolBug(f"unknown location {loc}")
        if not flows_to(label, self.locations[loc]):
            raise ProtocolBug(f"event {eid} labelled {label} cannot occur at {loc}")
        ev = Event(eid, kind, loc, label, txn=txn, proto=proto, **extra)
        if ev.lock is not None:
            self._check_lock(ev)
        ds = tuple(sorted({d for d in deps if d is not None}))
        acc: set[str] = set()
        for d in ds:
            if d not in self.anc:
                raise ProtocolBug(f"event {eid} depends on unscheduled {d}")
            acc.add(d)
            acc |= self.anc[d]
        self.preds[eid] = ds
        self.anc[eid] = frozenset(acc)
        self.schedule.append(ev)
        if proto and txn is not None and not ev.is_nie:
            self.proto_counts[txn] = self.proto_counts.get(txn, 0) + 1
        self._emitted = ev
        return ev

    def _check_lock(self, ev: Event) -> None:
        holder = self.lock_holders.get(ev.lock)
        if ev.kind == Kind.LOCK_ACQUIRE:
            if holder is not None:
                raise ProtocolBug(f"{ev.id}: {ev.lock} is held by {holder}")
            self.lock_holders[ev.lock] = ev.txn
        elif ev.kind == Kind.LOCK_RELEASE:
            if holder != ev.txn:
                raise ProtocolBug(f"{ev.id}: {ev.txn} releases {ev.lock} held by {holder}")
            self.lock_holders[ev.lock] = None

    def send(self, msg_id: str, src: str, dst: str, label: Label, kind: str, payload: Any,
             *, txn: Optional[str], deps: Iterable[str] = (), **extra) -> Message:
        ev = self.emit(f"{msg_id}/send", Kind.SEND, src, label, deps=deps, txn=txn,
                       msg=msg_id, info=kind, **extra)
        m = Message(msg_id, src, dst, label, kind, payload, txn, ev.id, self.time)
        due = self.time + self.network.delay(self.seed, msg_id)
        self.pending[f"msg:{msg_id}"] = Pending(due, (1, self.time, dst, msg_id), msg=m)
        return m

    # -- stepping ---------------------------------------------------------

    def has_work(self, loc: str) -> bool:
        hook = getattr(self.protocol, "has_work", None)
        return hook(self, loc) if hook else bool(self.work[loc])

    def enabled(self) -> list[tuple[str, str]]:
        out = [("nie", k) for k in sorted(self.pending)]
        out += [("loc", l) for l in self.loc_order if self.has_work(l)]
        return out

    def _deliver(self, key: str) -> None:
        p = self.pending.pop(key)
        if p.txn is not None:
            spec = self.txns[p.txn]
            ev = self.emit(spec.start_event, Kind.START, spec.runner, self.bottom,
                           txn=p.txn, proto=False)
            self.protocol.on_start(self, p.txn, ev)
        else:
            m = p.msg
            self.emit(m.delay_event, Kind.DELAY, m.dst, m.label, deps=[m.send_event],
                      txn=m.txn, msg=m.id, info=m.kind)
            self.add_work(m.dst, "recv", m.txn, msg=m)

    def _run_location(self, loc: str) -> None:
        hook = getattr(self.protocol, "step", None)
        if hook is not None and hook(self, loc):
            return
        k = min(self.work[loc])
        w = self.work[loc].pop(k)
        if w.kind == "recv":
            m = w.msg
            ev = self.emit(m.receive_event, Kind.RECEIVE, loc, m.label, deps=[m.delay_event],
                           txn=m.txn, msg=m.id, info=m.kind)
            self.protocol.on_receive(self, loc, m, ev)
        else:
            self.protocol.handle(self, loc, w)

    def _record(self) -> Event:
        ev = self._emitted
        if ev is None:
            raise ProtocolBug("step scheduled no event")
        self._emitted = None
        self.step_no += 1
        if self.keep_trace:
            self.trace.append({"step": self.step_no, "time": self.time, "event": ev.to_json(),
                               "hb_new_edges": [[d, ev.id] for d in self.preds[ev.id]]})
        return ev

    def apply(self, choice: tuple[str, str]) -> tuple["World", Event]:
        w = self.clone()
        kind, arg = choice
        if kind == "nie":
            w._deliver(arg)
        else:
            w._run_location(arg)
        return w, w._record()

    def step(self) -> Optional[Event]:
        """Advance along the seeded schedule; ``None`` once quiescent."""
        while True:
            due = [k for k, p in self.pending.items() if p.due <= self.time]
            if due:
                self._deliver(min(due, key=lambda k: (self.pending[k].due, self.pending[k].order)))
                return self._record()
            n = len(self.loc_order)
            for i in range(n):
                loc = self.loc_order[(self.cursor + i) % n]
                if self.has_work(loc):
                    self.cursor = (self.cursor + i) % n
                    self._run_location(loc)
                    return self._record()
            if not self.pending:
                return None
            self.time = min(p.due for p in self.pending.values())

    # -- views ------------------------------------------------------------

    def clone(self) -> "World":
        w = copy.copy(self)
        w.schedule = list(self.schedule)
        w.preds = dict(self.preds)
        w.anc = dict(self.anc)
        w.pending = dict(self.pending)
        w.work = {l: dict(q) for l, q in self.work.items()}
        w.seq = dict(self.seq)
        w.proto_counts = dict(self.proto_counts)
        w.lock_holders = dict(self.lock_holders)
        w.trace = []
        w.keep_trace = False
        w.ps = copy.deepcopy(self.ps)
        return w

    def system_state(self) -> SystemState:
        edges = [(a, b) for b, ps in self.preds.items() for a in ps]
        return SystemState(self.schedule, edges, ancestors=self.anc)

    def execution(self) -> Execution:
        edges = tuple((a, b) for b, ps in self.preds.items() for a in ps)
        return Execution(SystemState([]), tuple(self.schedule), edges)

    def txn_ids(self) -> list[str]:
        return sorted(self.txns)

    def committed(self, txn: str) -> bool:
        return self.protocol.committed(self, txn)

    def protocol_event_counts(self) -> dict[str, int]:
        return dict(self.proto_counts)

    def quiescent(self) -> bool:
        return not self.pending and not any(self.has_work(l) for l in self.loc_order)


@dataclass
class RunResult:
    world: World
    execution: Execution
    quiescent: bool
    committed: dict[str, bool]
    steps: int

    @property
    def deadlock(self) -> bool:
        return not all(self.committed.values())

    def trace_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.world.trace]


def step(world: World) -> Optional[Event]:
    return world.step()


def run_to_quiescence(world: World, max_steps: Optional[int] = None) -> RunResult:
    limit = max_steps if max_steps is not None else max_steps_default()
    n = 0
    quiet = False
    while n < limit:
        if world.step() is None:
            quiet = True
            break
        n += 1
    else:
        quiet = world.quiescent()
    return RunResult(world, world.execution(), quiet,
                     {t: world.committed(t) for t in world.txn_ids()}, n)


# ---------------------------------------------------------------------------
# replaying a fixed protocol mapping, for hand-built executions


@dataclass(frozen=True)
class ScriptedEvent:
    id: str
    deps: tuple[str, ...]
    txn: Optional[str] = None
    label: Optional[Label] = None


class ScriptedProtocol:
    """A protocol given as a table: frozenset of scheduled ids -> next event."""

    name = "scripted"

    def __init__(self, location: str, mapping: Mapping[frozenset, ScriptedEvent]):
        self.location = location
        self.mapping = dict(mapping)

    def setup(self, world: World) -> None:
        world.ps = None

    def on_start(self, world, txn, ev) -> None:
        pass

    def has_work(self, world: World, loc: str) -> bool:
        return loc == self.location and self._next(world) is not None

    def _next(self, world: World) -> Optional[ScriptedEvent]:
        return self.mapping.get(frozenset(world.preds))

    def step(self, world: World, loc: str) -> bool:
        se = self._next(world)
        world.emit(se.id, Kind.LOCAL, loc, se.label or world.bottom, deps=se.deps,
                   txn=se.txn, proto=False)
        return True

    def committed(self, world, txn) -> bool:
        return True
