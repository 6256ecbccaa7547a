"""Security and correctness harnesses.

* low projections and relaxed observational determinism over matched seeds
* the abort-channel probe and the abort confinement trace check
* brute-force oracles (conflict graph, precedence cycles) independent of networkx
* exhaustive exploration helpers and the cloud-wall impossibility search
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .lattice import Label, flows_to, join
from .model import (ExecutionExplorer, Event, Execution, Kind, NecessaryReport, SystemState,
                    Transaction, check_necessary_conditions, conflicts, is_serializable,
                    is_transaction_secure, satisfies_relaxed_monotonicity, transactions)
from .netsim import RunResult
from .protocols import Workload, make_protocol
from .scenarios import Scenario


# ---------------------------------------------------------------------------
# projections and relaxed observational determinism


@dataclass(frozen=True)
class LowProjection:
    observer: Label
    events: tuple[Event, ...]
    nies: tuple[Event, ...]

    def ids(self) -> list[str]:
        return [e.id for e in self.events]


def low_projection(e: Execution, observer: Label) -> LowProjection:
    evs = tuple(x for x in e.schedule if flows_to(x.label, observer))
    return LowProjection(observer, evs, tuple(x for x in evs if x.is_nie))


def as_observer(obs: Union[str, Label]) -> Label:
    return obs if isinstance(obs, Label) else Label.observer(obs)


class InvalidExperiment(ValueError):
    """The secret variants differ in something the observer may see."""


@dataclass
class RodReport:
    verdict: str
    observer: str
    variants: list[str]
    seeds: int
    per_seed: list[dict]
    diverging_step: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.verdict == "PASS"

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "observer": self.observer, "variants": self.variants,
                "seeds": self.seeds, "per_seed": self.per_seed,
                "diverging_step": self.diverging_step}


def _first_divergence(a: LowProjection, b: LowProjection) -> Optional[int]:
    for i, (x, y) in enumerate(itertools.zip_longest(a.events, b.events)):
        if x != y:
            return i
    return None


def validate_variants(s: Scenario, observer: Label, variants: Sequence[str]) -> None:
    env = s.env()
    for v in variants:
        for fid in s.variants[v]:
            if flows_to(env.fields[fid].label, observer):
                raise InvalidExperiment(
                    f"variant {v!r} changes {fid}, which the observer may read")


def rod_check(s: Scenario, protocol: str, observer: Union[str, Label],
              variants: Optional[Sequence[str]] = None, seeds: Iterable[int] = range(100),
              *, max_steps: Optional[int] = None) -> RodReport:
    obs = as_observer(observer)
    names = list(variants) if variants is not None else list(s.variants) or [None]
    if None not in names:
        validate_variants(s, obs, names)
    wls = {v: s.workload(v) for v in names}
    per_seed, first = [], None
    seeds = list(seeds)
    for seed in seeds:
        projs = {}
        for v in names:
            r = s.run(protocol, seed, variant=v, max_steps=max_steps, workload=wls[v])
            projs[v] = low_projection(r.execution, obs)
        base = projs[names[0]]
        diff = None
        for v in names[1:]:
            pos = _first_divergence(base, projs[v])
            if pos is not None:
                diff = {"seed": seed, "variants": [names[0], v], "position": pos,
                        "left": _ev(base.events, pos), "right": _ev(projs[v].events, pos)}
                break
        per_seed.append({"seed": seed, "equal": diff is None, "length": len(base.events)})
        if diff and first is None:
            first = diff
    return RodReport("PASS" if first is None else "FAIL", str(obs), [str(n) for n in names],
                     len(seeds), per_seed, first)


def _ev(evs: Sequence[Event], i: int) -> Optional[dict]:
    return evs[i].to_json() if i < len(evs) else None


# ---------------------------------------------------------------------------
# abort channel


@dataclass
class ProbeReport:
    attacker: str
    trials: int
    aborts: dict[str, int]
    runs_with_abort: dict[str, int]
    projection_divergences: int
    first_divergence: Optional[dict]
    per_seed: list[dict] = field(default_factory=list)

    @property
    def rates(self) -> dict[str, float]:
        return {v: n / self.trials for v, n in self.runs_with_abort.items()}

    def to_json(self) -> dict:
        return {"attacker": self.attacker, "trials": self.trials, "aborts": self.aborts,
                "runs_with_abort": self.runs_with_abort, "abort_rate": self.rates,
                "projection_divergences": self.projection_divergences,
                "first_divergence": self.first_divergence,
                "per_seed": self.per_seed,
                "verdict": "PASS" if self.projection_divergences == 0 else "FAIL"}


def attacker_aborts(e: Execution, attacker: str) -> list[Event]:
    obs = Label.observer(attacker)
    return [x for x in e.schedule if x.kind == Kind.ABORT and flows_to(x.label, obs)]


def abort_channel_probe(s: Scenario, protocol: str, attacker: str, trials: int,
                        variants: Optional[Sequence[str]] = None, *,
                        max_steps: Optional[int] = None) -> ProbeReport:
    names = list(variants) if variants is not None else list(s.variants)
    obs = Label.observer(attacker)
    wls = {v: s.workload(v) for v in names}
    aborts = {v: 0 for v in names}
    runs = {v: 0 for v in names}
    divergences, first, per_seed = 0, None, []
    for seed in range(trials):
        projs = {}
        row: dict[str, Any] = {"seed": seed}
        for v in names:
            r = s.run(protocol, seed, variant=v, max_steps=max_steps, workload=wls[v])
            n = len(attacker_aborts(r.execution, attacker))
            row[v] = n
            aborts[v] += n
            runs[v] += n > 0
            projs[v] = low_projection(r.execution, obs)
        per_seed.append(row)
        for v in names[1:]:
            pos = _first_divergence(projs[names[0]], projs[v])
            if pos is not None:
                divergences += 1
                if first is None:
                    first = {"seed": seed, "variants": [names[0], v], "position": pos}
                break
    return ProbeReport(attacker, trials, aborts, runs, divergences, first, per_seed)


def abort_confinement_violations(e: Execution, locations: Mapping[str, Label]) -> list[str]:
    """Every place that learns of an abort must host a principal entitled to its cause.

    Abort events carry ``cause``: the label of the information the abort
    reveals.  Receipts of abort notices inherit the cause of the Abort that
    triggered the send.
    """
    by_id = {x.id: x for x in e.schedule}
    preds: dict[str, list[str]] = {}
    for a, b in e.edges:
        preds.setdefault(b, []).append(a)
    out = []

    def check(ev: Event, cause: Label, what: str) -> None:
        hosts = locations[ev.location].readers
        if not hosts & (cause.readers | cause.writers):
            out.append(f"{what} {ev.id} at {ev.location} reveals {cause}")

    for x in e.schedule:
        if x.kind == Kind.ABORT and x.cause is not None:
            check(x, x.cause, "abort")
        elif x.kind == Kind.RECEIVE and x.msg:
            send = by_id.get(f"{x.msg}/send")
            if send is None:
                continue
            for p in preds.get(send.id, []):
                src = by_id.get(p)
                if src is not None and src.kind == Kind.ABORT and src.cause is not None:
                    check(x, src.cause, "abort notice")
    return out


# ---------------------------------------------------------------------------
# oracles written without networkx


def _reach(succ: Mapping[str, Iterable[str]], a: str, b: str) -> bool:
    seen, stack = set(), [a]
    while stack:
        n = stack.pop()
        for m in succ.get(n, ()):
            if m == b:
                return True
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def hb_oracle(state: SystemState, a: str, b: str) -> bool:
    succ: dict[str, list[str]] = {}
    for x, y in state.edges:
        succ.setdefault(x, []).append(y)
    return _reach(succ, a, b)


def _has_cycle(nodes: Iterable[str], succ: Mapping[str, Iterable[str]]) -> bool:
    color: dict[str, int] = {}

    def visit(n: str) -> bool:
        color[n] = 1
        for m in succ.get(n, ()):
            c = color.get(m, 0)
            if c == 1 or (c == 0 and visit(m)):
                return True
        color[n] = 2
        return False

    return any(color.get(n, 0) == 0 and visit(n) for n in sorted(nodes))


def precedence_oracle(state: SystemState, txns: Optional[Iterable[Transaction]] = None
                      ) -> dict[str, set[str]]:
    """Direct transaction dependence computed by plain path search."""
    ts = list(txns) if txns is not None else list(transactions(state).values())
    succ: dict[str, list[str]] = {}
    for x, y in state.edges:
        succ.setdefault(x, []).append(y)
    out: dict[str, set[str]] = {t.id: set() for t in ts}
    for t1, t2 in itertools.permutations(ts, 2):
        if any(_reach(succ, a, b) for a in t1.events for b in t2.events):
            out[t1.id].add(t2.id)
    return out


def precedes_oracle(state: SystemState, t1: str, t2: str,
                    txns: Optional[Iterable[Transaction]] = None) -> bool:
    if t1 == t2:
        return False
    return _reach(precedence_oracle(state, txns), t1, t2)


def serializable_oracle(state: SystemState, txns: Optional[Iterable[Transaction]] = None) -> bool:
    g = precedence_oracle(state, txns)
    return not _has_cycle(g, g)


def conflict_graph_acyclic(state: SystemState) -> bool:
    """Classic conflict serializability: edge T1->T2 when a T1 access conflicts
    with a later T2 access."""
    ts = transactions(state)
    owner = {e: t for t, tx in ts.items() for e in tx.events}
    succ: dict[str, list[str]] = {}
    for x, y in state.edges:
        succ.setdefault(x, []).append(y)
    acc = [state.events[e] for e in owner if state.events[e].kind in (Kind.READ, Kind.WRITE)]
    g: dict[str, set[str]] = {t: set() for t in ts}
    for a, b in itertools.permutations(acc, 2):
        if owner[a.id] != owner[b.id] and conflicts(a, b) and _reach(succ, a.id, b.id):
            g[owner[a.id]].add(owner[b.id])
    return not _has_cycle(g, g)


def unordered_conflicts(state: SystemState) -> list[tuple[str, str]]:
    ts = transactions(state)
    members = {e for t in ts.values() for e in t.events}
    succ: dict[str, list[str]] = {}
    for x, y in state.edges:
        succ.setdefault(x, []).append(y)
    acc = sorted((state.events[e] for e in members
                  if state.events[e].kind in (Kind.READ, Kind.WRITE)), key=lambda e: e.id)
    return [(a.id, b.id) for a, b in itertools.combinations(acc, 2)
            if conflicts(a, b) and not _reach(succ, a.id, b.id) and not _reach(succ, b.id, a.id)]


def precommit_snapshot_ok(e: Execution) -> bool:
    """SC: before a transaction commits, each member access sits in a precommitted stage."""
    pos = {x.id: i for i, x in enumerate(e.schedule)}
    state = e.state()
    for t, tx in transactions(state).items():
        commit = f"{t}:commit"
        if commit not in pos:
            continue
        for eid in tx.events:
            ev = state.events[eid]
            if ev.kind not in (Kind.READ, Kind.WRITE):
                continue
            pre = f"{ev.attempt}.precommit"
            if pre not in pos or not pos[eid] < pos[pre] < pos[commit]:
                return False
    return True


# ---------------------------------------------------------------------------
# exhaustive exploration over scenarios


def explorer_for(s: Scenario, protocol: Union[str, Any], *, variant: Optional[str] = None,
                 only: Optional[Iterable[str]] = None, max_txns: int = 2,
                 max_events: int = 16) -> ExecutionExplorer:
    proto = make_protocol(protocol) if isinstance(protocol, str) else protocol
    w = s.world(proto, 0, variant=variant, only=only, at_zero=True)
    w.keep_trace = False
    return ExecutionExplorer(w, max_txns=max_txns, max_events=max_events)


@dataclass
class ExploreReport:
    scenario: str
    protocol: str
    variant: Optional[str]
    subset: tuple[str, ...]
    states: int
    terminals: int
    stuck: int
    non_serializable: int
    necessary: Optional[NecessaryReport] = None

    @property
    def ok(self) -> bool:
        return (not self.stuck and not self.non_serializable
                and (self.necessary is None or self.necessary.ok))

    def to_json(self) -> dict:
        d = {"scenario": self.scenario, "protocol": self.protocol, "variant": self.variant,
             "transactions": list(self.subset), "states": self.states,
             "terminals": self.terminals, "stuck": self.stuck,
             "non_serializable": self.non_serializable}
        if self.necessary is not None:
            d["necessary"] = self.necessary.to_json()
        return d


def explore_scenario(s: Scenario, protocol: str, *, variant: Optional[str] = None,
                     max_events: int = 16, necessary: bool = True) -> list[ExploreReport]:
    """Every non-empty subset of the scenario's starts, explored exhaustively."""
    txns = [t.txn for t in s.starts]
    out = []
    for k in range(1, len(txns) + 1):
        for sub in itertools.combinations(txns, k):
            ex = explorer_for(s, protocol, variant=variant, only=sub,
                              max_txns=max(2, k), max_events=max_events)
            bad = sum(1 for n in ex.terminals() if not is_serializable(n.world.system_state()))
            nec = check_necessary_conditions(ex) if necessary and k >= 2 else None
            out.append(ExploreReport(s.name, protocol, variant, sub, len(ex.nodes),
                                     len(ex.terminals()), len(ex.stuck()), bad, nec))
    return out


# ---------------------------------------------------------------------------
# the cloud wall


def cloud_wall_state() -> tuple[SystemState, dict[str, Label]]:
    """Dave's (r) and Carol's (b) transactions, each sending to both clouds."""
    A, B, C, D = "Alice", "Bob", "Carol", "Dave"
    locs = {"alice": Label({A}, ()), "bob": Label({B}, ()),
            "carol": Label({C}, ()), "dave": Label({D}, ())}
    evs, edges = [], []
    for who, home, p in (("r", "dave", D), ("b", "carol", C)):
        t = "TD" if who == "r" else "TC"
        evs += [
            Event(f"{who}:start", Kind.START, home, Label.of({p, A, B}), txn=t),
            Event(f"{who}0", Kind.SEND, home, Label.of({p, A}), txn=t),
            Event(f"{who}1", Kind.SEND, home, Label.of({p, B}), txn=t),
            Event(f"{who}2", Kind.RECEIVE, "alice", Label.of({p, A}), txn=t, field="alice.log"),
            Event(f"{who}3", Kind.RECEIVE, "bob", Label.of({p, B}), txn=t, field="bob.log"),
        ]
        edges += [(f"{who}:start", f"{who}0"), (f"{who}:start", f"{who}1"),
                  (f"{who}0", f"{who}2"), (f"{who}1", f"{who}3")]
    return SystemState(evs, edges), locs


# Per-cloud game.  A cloud sees only its own inputs: the arrival of C's or
# D's message, or an idle tick.  After each input its policy either waits or
# appends one arrived transaction to its log.  Outcomes of one local run:
# the final log order, or "stuck" if something that arrived is never logged.

_INPUTS = ("C", "D", "tick")


@lru_cache(maxsize=None)
def _achievable(arrived: frozenset, logged: tuple, used: int, bound: int) -> dict:
    """{frozenset of outcomes: number of policies} for the subtree below this point.

    Called right after an input has been seen; the policy now picks an action.
    """
    acts = [None] + [t for t in sorted(arrived) if t not in logged]
    total: Counter = Counter()
    for a in acts:
        lg = logged + (a,) if a else logged
        for s, n in _continue(arrived, lg, used, bound).items():
            total[s] += n
    return dict(total)


@lru_cache(maxsize=None)
def _continue(arrived: frozenset, logged: tuple, used: int, bound: int) -> dict:
    if used == bound:
        out = "".join(logged) if set(logged) == set(arrived) else "stuck"
        return {frozenset([out]): 1}
    acc: dict = {frozenset(): 1}
    for i in _INPUTS:
        if i != "tick" and i in arrived:
            continue
        arr = arrived | {i} if i != "tick" else arrived
        child = _achievable(frozenset(arr), logged, used + 1, bound)
        nxt: Counter = Counter()
        for s1, n1 in acc.items():
            for s2, n2 in child.items():
                nxt[s1 | s2] += n1 * n2
        acc = dict(nxt)
    return acc


def cloud_outcome_sets(bound: int) -> dict[frozenset, int]:
    """Achievable outcome sets of a single cloud, with policy counts."""
    return _continue(frozenset(), (), 0, bound)


def _policies(arrived: frozenset, logged: tuple, used: int, bound: int):
    """Brute force: yield the outcome set of every policy explicitly."""
    if used == bound:
        yield frozenset(["".join(logged) if set(logged) == set(arrived) else "stuck"])
        return
    kids = []
    for i in _INPUTS:
        if i != "tick" and i in arrived:
            continue
        arr = frozenset(arrived | {i}) if i != "tick" else arrived
        opts = []
        for a in [None] + [t for t in sorted(arr) if t not in logged]:
            lg = logged + (a,) if a else logged
            opts.extend(_policies(arr, lg, used + 1, bound))
        kids.append(opts)
    for combo in itertools.product(*kids):
        yield frozenset().union(*combo)


def cloud_outcome_sets_bruteforce(bound: int) -> dict[frozenset, int]:
    return dict(Counter(_policies(frozenset(), (), 0, bound)))


@dataclass
class ImpossibilityReport:
    bound: int
    transaction_secure: dict[str, bool]
    relaxed_monotonic: dict[str, bool]
    checker: dict[str, list[str]]
    outcome_sets: list[dict]
    policies_per_cloud: int
    candidates: int
    failing_candidates: int
    witness: dict

    @property
    def ok(self) -> bool:
        return (all(self.transaction_secure.values())
                and not any(self.relaxed_monotonic.values())
                and all(self.checker.values())
                and self.failing_candidates == self.candidates)

    def to_json(self) -> dict:
        return {"bound": self.bound, "transaction_secure": self.transaction_secure,
                "relaxed_monotonic": self.relaxed_monotonic, "checker": self.checker,
                "outcome_sets": self.outcome_sets,
                "policies_per_cloud": str(self.policies_per_cloud),
                "candidates": str(self.candidates),
                "failing_candidates": str(self.failing_candidates),
                "witness": self.witness, "verdict": "PASS" if self.ok else "FAIL"}


def _fails_alone(outcomes: frozenset) -> bool:
    """A cloud policy is unusable on its own if it can get stuck."""
    return "stuck" in outcomes


def impossibility_demo(bound: int = 6, scenario: Optional[Scenario] = None) -> ImpossibilityReport:
    state, locs = cloud_wall_state()
    ts = transactions(state)
    secure = {t: is_transaction_secure(ts[t], state) for t in sorted(ts)}
    relaxed = {t: satisfies_relaxed_monotonicity(ts[t], state, locs) for t in sorted(ts)}
    checker: dict[str, list[str]] = {}
    if scenario is not None:
        for rep in scenario.check():
            checker[rep.program] = [v.detail for v in rep.violations]

    sets = cloud_outcome_sets(bound)
    per_cloud = sum(sets.values())
    # a pair of policies fails unless both are live and their orders always agree;
    # clouds see independent inputs, so Alice's and Bob's outcomes combine freely
    failing = 0
    for sa, na in sets.items():
        for sb, nb in sets.items():
            inconsistent = ("CD" in sa and "DC" in sb) or ("DC" in sa and "CD" in sb)
            if _fails_alone(sa) or _fails_alone(sb) or inconsistent:
                failing += na * nb
    rows = [{"outcomes": sorted(s), "policies": str(n),
             "live_and_single_order": "stuck" not in s and len(s & {"CD", "DC"}) == 1}
            for s, n in sorted(sets.items(), key=lambda kv: sorted(kv[0]))]
    witness = {
        "state": "C's message reached Alice first; D's message reached Bob first",
        "alice_inputs": ["C", "D"], "bob_inputs": ["D", "C"],
        "eager_policy": {"alice_log": "CD", "bob_log": "DC"},
        "serializable": False,
    }
    return ImpossibilityReport(bound, secure, relaxed, checker, rows, per_cloud,
                               per_cloud * per_cloud, failing, witness)
