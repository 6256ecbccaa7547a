"""Events, system states, executions and the definitional predicates over them.

The explorer at the bottom of this module is generic: it drives any object
with the small ``World`` interface (see ``ExploreWorld``), which is how the
simulator in ``netsim`` plugs in.
"""
from __future__ import annotations

import enum
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Optional, Protocol, Sequence

import networkx as nx

from .lattice import Label, flows_to


class Kind(str, enum.Enum):
    START = "Start"
    READ = "Read"
    WRITE = "Write"
    SEND = "Send"
    RECEIVE = "Receive"
    DELAY = "NetworkDelay"
    LOCK_ACQUIRE = "LockAcquire"
    LOCK_RELEASE = "LockRelease"
    PRECOMMIT = "Precommit"
    COMMIT = "Commit"
    ABORT = "Abort"
    LOCAL = "Local"


NIE_KINDS = frozenset({Kind.START, Kind.DELAY})
ACCESS_KINDS = frozenset({Kind.READ, Kind.WRITE})


@dataclass(frozen=True)
class Event:
    id: str
    kind: Kind
    location: str
    label: Label
    txn: Optional[str] = None
    field: Optional[str] = None
    # protocol bookkeeping events carry txn but are not members of it
    proto: bool = False
    lock: Optional[str] = None
    # attempt key that an Abort event cancels
    attempt: Optional[str] = None
    # for Abort events: label of the information the abort reveals
    cause: Optional[Label] = None
    msg: Optional[str] = None
    info: str = ""

    @property
    def is_nie(self) -> bool:
        return self.kind in NIE_KINDS

    def to_json(self) -> dict:
        d: dict[str, Any] = {
            "id": self.id,
            "kind": self.kind.value,
            "loc": self.location,
            "label": str(self.label),
            "txn": self.txn,
        }
        for k in ("field", "lock", "attempt", "msg"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.proto:
            d["proto"] = True
        if self.cause is not None:
            d["cause"] = str(self.cause)
        if self.info:
            d["info"] = self.info
        return d


@dataclass(frozen=True)
class Location:
    id: str
    label: Label

    @property
    def hosts(self) -> frozenset[str]:
        return self.label.readers


def conflicts(a: Event, b: Event) -> bool:
    if a.id == b.id or a.field is None or a.field != b.field:
        return False
    if a.kind not in ACCESS_KINDS or b.kind not in ACCESS_KINDS:
        return False
    return a.kind == Kind.WRITE or b.kind == Kind.WRITE


class UnknownEvent(KeyError):
    pass


class SystemState:
    """Finite event set plus hb, stored as direct edges with cached ancestors."""

    __slots__ = ("events", "preds", "_anc", "_key")

    def __init__(
        self,
        events: Iterable[Event],
        edges: Iterable[tuple[str, str]] = (),
        *,
        ancestors: Optional[Mapping[str, frozenset[str]]] = None,
    ):
        self.events: dict[str, Event] = {e.id: e for e in events}
        preds: dict[str, set[str]] = {i: set() for i in self.events}
        for a, b in edges:
            if a not in self.events or b not in self.events:
                raise UnknownEvent(a if a not in self.events else b)
            preds[b].add(a)
        self.preds = {k: frozenset(v) for k, v in preds.items()}
        self._anc = dict(ancestors) if ancestors is not None else None
        self._key = None

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(a, b) for b, ps in self.preds.items() for a in sorted(ps)]

    def ancestors(self, eid: str) -> frozenset[str]:
        if eid not in self.events:
            raise UnknownEvent(eid)
        if self._anc is None:
            self._anc = _closure(self.preds)
        return self._anc[eid]

    def key(self) -> Hashable:
        """Canonical hash key: equal event set and equal hb."""
        if self._key is None:
            self._key = frozenset((i, ps) for i, ps in self.preds.items())
        return self._key

    def __contains__(self, eid: str) -> bool:
        return eid in self.events

    def __len__(self) -> int:
        return len(self.events)


def _closure(preds: Mapping[str, frozenset[str]]) -> dict[str, frozenset[str]]:
    g = nx.DiGraph()
    g.add_nodes_from(preds)
    g.add_edges_from((a, b) for b, ps in preds.items() for a in ps)
    if not nx.is_directed_acyclic_graph(g):
        raise ValueError("happens-before contains a cycle")
    anc: dict[str, frozenset[str]] = {}
    for n in nx.topological_sort(g):
        acc: set[str] = set()
        for p in preds[n]:
            acc.add(p)
            acc |= anc[p]
        anc[n] = frozenset(acc)
    return anc


def happens_before(state: SystemState, e1: str, e2: str) -> bool:
    if e1 not in state.events:
        raise UnknownEvent(e1)
    return e1 in state.ancestors(e2)


@dataclass(frozen=True)
class Transaction:
    id: str
    start: Event
    events: frozenset[str]

    def __contains__(self, eid: str) -> bool:
        return eid in self.events


def aborted_attempts(state: SystemState) -> frozenset[str]:
    return frozenset(
        e.attempt for e in state.events.values() if e.kind == Kind.ABORT and e.attempt
    )


def transactions(state: SystemState) -> dict[str, Transaction]:
    """Member events: non-protocol events tagged with the txn, minus aborted attempts."""
    dead = aborted_attempts(state)
    members: dict[str, list[Event]] = defaultdict(list)
    for e in state.events.values():
        if e.txn is None or e.proto or (e.attempt is not None and e.attempt in dead):
            continue
        members[e.txn].append(e)
    out = {}
    for t, evs in members.items():
        starts = [e for e in evs if e.kind == Kind.START]
        if len(starts) != 1:
            continue
        out[t] = Transaction(t, starts[0], frozenset(e.id for e in evs))
    return out


def _direct(state: SystemState, t1: Transaction, t2: Transaction) -> bool:
    if t1.id == t2.id:
        return False
    return any(t1.events & state.ancestors(e2) for e2 in t2.events)


def precedence_graph(state: SystemState, txns: Iterable[Transaction]) -> nx.DiGraph:
    ts = list(txns)
    g = nx.DiGraph()
    g.add_nodes_from(t.id for t in ts)
    for a, b in itertools.permutations(ts, 2):
        if _direct(state, a, b):
            g.add_edge(a.id, b.id)
    return g


def transaction_precedes(state: SystemState, t1: Transaction, t2: Transaction,
                         txns: Optional[Iterable[Transaction]] = None) -> bool:
    if t1.id == t2.id:
        return False
    pool = {t.id: t for t in (txns if txns is not None else transactions(state).values())}
    pool.setdefault(t1.id, t1)
    pool.setdefault(t2.id, t2)
    g = precedence_graph(state, pool.values())
    return nx.has_path(g, t1.id, t2.id)


def is_serializable(state: SystemState, txns: Optional[Iterable[Transaction]] = None) -> bool:
    ts = list(txns) if txns is not None else list(transactions(state).values())
    return nx.is_directed_acyclic_graph(precedence_graph(state, ts))


def is_transaction_secure(t: Transaction, state: SystemState) -> bool:
    for e2 in t.events:
        for e1 in t.events & state.ancestors(e2):
            if not flows_to(state.events[e1].label, state.events[e2].label):
                return False
    return True


def is_monotonic(t: Transaction, state: SystemState) -> bool:
    if not is_transaction_secure(t, state):
        return False
    ids = sorted(t.events)
    for a, b in itertools.combinations(ids, 2):
        if a not in state.ancestors(b) and b not in state.ancestors(a):
            return False
    return True


def visible_to(t: Transaction, e: Event | str, loc: str, state: SystemState) -> bool:
    eid = e if isinstance(e, str) else e.id
    if state.events[eid].location == loc:
        return True
    return any(
        state.events[x].location == loc and eid in state.ancestors(x) for x in t.events
    )


def satisfies_relaxed_monotonicity(t: Transaction, state: SystemState,
                                   locations: Optional[Iterable[str]] = None) -> bool:
    if not is_transaction_secure(t, state):
        return False
    locs = set(locations) if locations is not None else {state.events[i].location for i in t.events}
    for loc in locs:
        vis = {i for i in t.events if visible_to(t, i, loc, state)}
        for n in t.events - vis:
            if not vis <= state.ancestors(n):
                return False
    return True


def state_problems(state: SystemState) -> list[str]:
    """Structural invariants; empty list when the state is well formed."""
    out = []
    try:
        state.ancestors(next(iter(state.events))) if state.events else None
    except ValueError as exc:
        return [str(exc)]
    accesses = [e for e in state.events.values() if e.kind in ACCESS_KINDS]
    dead = aborted_attempts(state)
    for a, b in itertools.combinations(accesses, 2):
        if not conflicts(a, b):
            continue
        if (a.attempt in dead and a.attempt) or (b.attempt in dead and b.attempt):
            continue
        if a.label != b.label or a.location != b.location:
            out.append(f"conflicting {a.id} and {b.id} differ in label or location")
        if not (happens_before(state, a.id, b.id) or happens_before(state, b.id, a.id)):
            out.append(f"conflicting {a.id} and {b.id} are unordered")
    return out


@dataclass
class Execution:
    start_state: SystemState
    schedule: tuple[Event, ...]
    edges: tuple[tuple[str, str], ...]

    def state(self) -> SystemState:
        evs = list(self.start_state.events.values()) + list(self.schedule)
        return SystemState(evs, list(self.start_state.edges) + list(self.edges))

    def is_linear_extension(self) -> bool:
        pos = {e.id: i for i, e in enumerate(self.schedule)}
        return all(pos.get(a, -1) < pos[b] for a, b in self.edges if b in pos)


@dataclass(frozen=True)
class Lock:
    id: str
    location: str
    label: Label
    events_per_txn: tuple[tuple[str, int], ...] = ()

    def holders(self) -> list[str]:
        return [t for t, n in self.events_per_txn if n % 2 == 1]


def locks_of(state: SystemState) -> dict[str, Lock]:
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    where: dict[str, tuple[str, Label]] = {}
    for e in state.events.values():
        if e.kind in (Kind.LOCK_ACQUIRE, Kind.LOCK_RELEASE) and e.lock:
            counts[e.lock][e.txn or ""] += 1
            where[e.lock] = (e.location, e.label)
    return {
        k: Lock(k, where[k][0], where[k][1], tuple(sorted(v.items())))
        for k, v in counts.items()
    }


# ---------------------------------------------------------------------------
# exhaustive exploration


class ExplorationBoundExceeded(RuntimeError):
    pass


class ExploreWorld(Protocol):
    def enabled(self) -> list[Hashable]: ...
    def apply(self, choice: Hashable) -> tuple["ExploreWorld", Event]: ...
    def system_state(self) -> SystemState: ...
    def committed(self, txn: str) -> bool: ...
    def txn_ids(self) -> list[str]: ...
    def protocol_event_counts(self) -> dict[str, int]: ...


@dataclass
class Node:
    key: Hashable
    world: Any
    children: list[tuple[Hashable, Event]] = field(default_factory=list)
    parents: list[tuple[Hashable, Event]] = field(default_factory=list)
    depth: int = 0


class ExecutionExplorer:
    """Enumerates every reachable system state of a world, merging equal states."""

    def __init__(self, root: Any, *, max_txns: int = 3, max_events: int = 16,
                 max_nodes: int = 2_000_000):
        if len(root.txn_ids()) > max_txns:
            raise ExplorationBoundExceeded(f"{len(root.txn_ids())} transactions > {max_txns}")
        self.max_events = max_events
        self.max_nodes = max_nodes
        self.txns = list(root.txn_ids())
        self.root_key = root.system_state().key()
        self.nodes: dict[Hashable, Node] = {self.root_key: Node(self.root_key, root)}
        self._explore()
        self._valence: dict[tuple[str, str], dict[Hashable, frozenset[str]]] = {}

    def _explore(self) -> None:
        stack = [self.root_key]
        while stack:
            node = self.nodes[stack.pop()]
            for choice in node.world.enabled():
                w2, ev = node.world.apply(choice)
                for t, n in w2.protocol_event_counts().items():
                    if n > self.max_events:
                        raise ExplorationBoundExceeded(
                            f"{t} used {n} protocol events (bound {self.max_events})")
                k = w2.system_state().key()
                child = self.nodes.get(k)
                if child is None:
                    if len(self.nodes) >= self.max_nodes:
                        raise ExplorationBoundExceeded(f"more than {self.max_nodes} states")
                    child = self.nodes[k] = Node(k, w2, depth=node.depth + 1)
                    stack.append(k)
                node.children.append((k, ev))
                child.parents.append((node.key, ev))
        # children are unique per event; keep deterministic order
        for n in self.nodes.values():
            n.children = sorted(set(n.children), key=lambda c: c[1].id)
            n.parents = sorted(set(n.parents), key=lambda c: c[1].id)

    def terminals(self) -> list[Node]:
        return [n for n in self.nodes.values() if not n.children]

    def stuck(self) -> list[Node]:
        return [n for n in self.terminals()
                if not all(n.world.committed(t) for t in self.txns)]

    def topo(self) -> list[Node]:
        return sorted(self.nodes.values(), key=lambda n: n.depth)

    def order_at(self, node: Node, t1: str, t2: str) -> Optional[str]:
        st = node.world.system_state()
        ts = transactions(st)
        if t1 not in ts or t2 not in ts:
            return None
        a = transaction_precedes(st, ts[t1], ts[t2], ts.values())
        b = transaction_precedes(st, ts[t2], ts[t1], ts.values())
        if a and not b:
            return f"{t1}<{t2}"
        if b and not a:
            return f"{t2}<{t1}"
        return None

    def reachable_orders(self, t1: str, t2: str) -> dict[Hashable, frozenset[str]]:
        pair = (t1, t2)
        if pair not in self._valence:
            out: dict[Hashable, frozenset[str]] = {}
            for n in reversed(self.topo()):
                if not n.children:
                    o = self.order_at(n, t1, t2)
                    out[n.key] = frozenset([o] if o else [])
                else:
                    acc: set[str] = set()
                    for k, _ in n.children:
                        acc |= out[k]
                    out[n.key] = frozenset(acc)
            self._valence[pair] = out
        return self._valence[pair]

    def valence(self, key: Hashable, t1: str, t2: str) -> "Valence":
        if key not in self.nodes:
            raise KeyError("state was not reached by the explorer")
        orders = self.reachable_orders(t1, t2)[key]
        if len(orders) >= 2:
            return Valence(True, None)
        return Valence(False, next(iter(orders)) if orders else None)


@dataclass(frozen=True)
class Valence:
    bivalent: bool
    order: Optional[str]

    def __str__(self) -> str:
        return "Bivalent" if self.bivalent else f"Univalent({self.order})"


def classify_valence(state: SystemState, t1: str, t2: str,
                     explorer: ExecutionExplorer) -> Valence:
    return explorer.valence(state.key(), t1, t2)


@dataclass
class ConditionViolation:
    condition: str
    first: str
    second: str
    state_events: list[str]
    detail: str = ""

    def to_json(self) -> dict:
        return {"condition": self.condition, "first": self.first, "second": self.second,
                "state": self.state_events, "detail": self.detail}


@dataclass
class NecessaryReport:
    states: int
    checked: int
    violations: list[ConditionViolation]
    stuck: int

    @property
    def ok(self) -> bool:
        return not self.violations and not self.stuck

    def to_json(self) -> dict:
        return {"states": self.states, "ordered_states_checked": self.checked,
                "stuck_terminals": self.stuck,
                "violations": [v.to_json() for v in self.violations[:20]],
                "violation_count": len(self.violations)}


def _decision_sets(ex: ExecutionExplorer, t1: str, t2: str) -> dict[Hashable, set[Optional[str]]]:
    """For every univalent node: ids of the events that made some path univalent.

    ``None`` stands for "already univalent at the root".
    """
    reach = ex.reachable_orders(t1, t2)
    uni = {k: len(v) < 2 for k, v in reach.items()}
    out: dict[Hashable, set[Optional[str]]] = {}
    for n in ex.topo():
        if not uni[n.key]:
            continue
        if n.key == ex.root_key:
            out[n.key] = {None}
            continue
        acc: set[Optional[str]] = set()
        for pk, ev in n.parents:
            if uni[pk]:
                acc |= out[pk]
            else:
                acc.add(ev.id)
        out[n.key] = acc
    return out


def check_necessary_conditions(ex: ExecutionExplorer) -> NecessaryReport:
    violations: list[ConditionViolation] = []
    checked = 0
    for t1, t2 in itertools.permutations(ex.txns, 2):
        dsets = _decision_sets(ex, t1, t2)
        for n in ex.topo():
            st = n.world.system_state()
            ts = transactions(st)
            if t1 not in ts or t2 not in ts:
                continue
            if not transaction_precedes(st, ts[t1], ts[t2], ts.values()):
                continue
            checked += 1
            T1, T2 = ts[t1], ts[t2]
            cands = dsets.get(n.key, set())
            fpd = [d for d in cands if d is not None and d in st.events and (
                d in T1.events or T1.events & st.ancestors(d))]
            both = [d for d in fpd if not (T2.events & st.ancestors(d))]
            confl = {e for e in T1.events | T2.events
                     if any(conflicts(st.events[e], st.events[f])
                            for f in (T2.events if e in T1.events else T1.events))}
            early = [d for d in both if all(d == c or d in st.ancestors(c) for c in confl)]
            bad = None
            if not fpd:
                bad = "First-Precedes-Decision"
            elif not both:
                bad = "Decision-Precedes-Second"
            elif not early:
                bad = "Decision-Precedes-Conflicts"
            if bad:
                violations.append(ConditionViolation(
                    bad, t1, t2, sorted(st.events),
                    f"decision candidates {sorted(map(str, cands))}"))
    return NecessaryReport(len(ex.nodes), checked, violations, len(ex.stuck()))
