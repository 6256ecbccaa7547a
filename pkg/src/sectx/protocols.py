"""Scheduling protocols driven by ``netsim.World``.

Each protocol keeps all of its mutable state in ``world.ps`` so that worlds
can be cloned for exploration.  Handlers emit exactly one event per step.

* ``TwoPhaseCommit``  optimistic execution, then prepare/commit per store.
  Aborts go to every participant whatever their label: the insecure baseline.
* ``PessimisticLocks`` one lock per label, acquired in program order,
  released in reverse.  Only monotonic transactions are accepted.
* ``StagedCommit``    per-cl stages, each reserved and precommitted at its
  store; commit travels back through the stores once the last stage is done.
* ``PreorderedLocks`` a deliberately broken variant of the lock protocol that
  fixes the transaction order before anything starts.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Iterable, Mapping, Optional

from .lattice import Label, flows_to, join, meet
from .model import Execution, Kind
from .netsim import Message, ProtocolRefused, Work, World
from .txdsl import (CheckReport, Env, Lit, Op, PcAnnotation, Program, Var, annotate_pc,
                    check_program, statically_monotonic)


class NonMonotonicTransaction(ProtocolRefused):
    pass


class StagePlanMissing(ProtocolRefused):
    pass


@dataclass(frozen=True)
class Workload:
    """Everything a protocol needs to know about the programs it runs."""

    env: Env
    programs: Mapping[str, Program]
    values: Mapping[str, Any]

    def store_of(self, fid: str) -> str:
        return self.env.fields[fid].store


def truthy(v: Any) -> bool:
    return bool(v) and v != "false"


def guards_hold(op: Op, env: Mapping[str, Any]) -> bool:
    for var, lit in op.guards:
        v = env.get(var)
        if lit is None:
            if not truthy(v):
                return False
        elif v != lit:
            return False
    return True


def evaluate(expr, env: Mapping[str, Any]) -> Any:
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Var):
        return env.get(expr.name)
    return None


def visible(label: Label, *locs: Label) -> Label:
    """Weaken ``label`` until every given location may host it."""
    readers = frozenset().union(*(l.readers for l in locs)) if locs else frozenset()
    return meet(label, Label(readers, ()))


class Base:
    name = "base"

    def __init__(self) -> None:
        self._cache: dict[tuple[int, str], Any] = {}

    # static analysis per program, cached on the (stateless) protocol object
    def annotation(self, wl: Workload, prog: str) -> PcAnnotation:
        k = (id(wl), "a:" + prog)
        if k not in self._cache:
            self._cache[k] = annotate_pc(wl.programs[prog], wl.env)
        return self._cache[k]

    def report(self, wl: Workload, prog: str) -> CheckReport:
        k = (id(wl), "r:" + prog)
        if k not in self._cache:
            self._cache[k] = check_program(wl.programs[prog], wl.env)
        return self._cache[k]

    def ops(self, world: World, txn: str) -> tuple[Op, ...]:
        return self.annotation(world.context, world.txns[txn].program).ops

    def runner(self, world: World, txn: str) -> str:
        return world.txns[txn].runner

    def committed(self, world: World, txn: str) -> bool:
        return bool(world.ps["txns"][txn].get("committed"))

    def tr(self, world: World, txn: str) -> dict:
        return world.ps["txns"][txn]

    def handle(self, world: World, loc: str, w: Work) -> None:
        getattr(self, "do_" + w.kind)(world, loc, w.txn, w.data)

    def on_receive(self, world: World, loc: str, m: Message, ev) -> None:
        getattr(self, "on_" + m.kind)(world, loc, m, ev)

    # field bookkeeping shared by 2PC and SC
    @staticmethod
    def _field(ps: dict, fid: str) -> dict:
        return ps["fields"].setdefault(fid, {"holders": {}, "w_rel": None, "r_rel": ()})

    @staticmethod
    def _blocker(fs: dict, txn: str, mode: str) -> Optional[str]:
        for other, h in sorted(fs["holders"].items()):
            if other != txn and (mode == "w" or h[0] == "w"):
                return other
        return None

    @staticmethod
    def _rel_deps(fs: dict, mode: str) -> list[str]:
        out = [fs["w_rel"]] if fs["w_rel"] else []
        if mode == "w":
            out += list(fs["r_rel"])
        return out

    @staticmethod
    def _released(fs: dict, mode: str, ev_id: str) -> None:
        if mode == "w":
            fs["w_rel"], fs["r_rel"] = ev_id, ()
        else:
            fs["r_rel"] = fs["r_rel"] + (ev_id,)


# ---------------------------------------------------------------------------
# staged commit


class StagedCommit(Base):
    name = "sc"

    def setup(self, world: World) -> None:
        wl: Workload = world.context
        for spec in world.txns.values():
            rep = self.report(wl, spec.program)
            if not rep.ok or rep.plan is None:
                detail = "; ".join(v.detail for v in rep.violations) or "no stage plan"
                raise StagePlanMissing(f"{spec.txn} ({spec.program}): {detail}")
            for n, st in enumerate(rep.plan.stages):
                if len(st.stores) != 1 or st.coordinator != st.stores[0]:
                    raise StagePlanMissing(
                        f"{spec.txn}: stage {n} must live at a single store that coordinates it")
                if not flows_to(Label.of(st.principals()), world.locations[spec.runner]):
                    raise StagePlanMissing(f"{spec.txn}: runner cannot receive stage {n} results")
        world.ps = {
            "values": dict(wl.values),
            "fields": {},
            "waiters": defaultdict(list),
            "attempts": {},
            "exec": {},
            "txns": {t: {"env": {}, "last": None, "committed": False} for t in world.txns},
        }

    def plan(self, world: World, txn: str):
        return self.report(world.context, world.txns[txn].program).plan

    def stage_label(self, world: World, txn: str, n: int) -> Label:
        return Label.of(self.plan(world, txn).stages[n].principals())

    # runner side ----------------------------------------------------------

    def on_start(self, world: World, txn: str, ev) -> None:
        self.tr(world, txn)["last"] = ev.id
        plan = self.plan(world, txn)
        if not plan.stages:
            self._queue_prints(world, txn, [o.index for o in self.ops(world, txn) if o.kind == "print"])
            world.add_work(self.runner(world, txn), "commit", txn)
        else:
            world.add_work(self.runner(world, txn), "req", txn, 0)

    def _queue_prints(self, world: World, txn: str, idxs: Iterable[int]) -> None:
        env = self.tr(world, txn)["env"]
        ops = self.ops(world, txn)
        for i in idxs:
            if guards_hold(ops[i], env):
                world.add_work(self.runner(world, txn), "print", txn, i)

    def do_req(self, world: World, loc: str, txn: str, n: int) -> None:
        tr = self.tr(world, txn)
        st = self.plan(world, txn).stages[n]
        world.send(f"{txn}:s{n}.req", loc, st.coordinator, self.stage_label(world, txn, n),
                   "req", (txn, n, tuple(sorted(tr["env"].items()))), txn=txn, deps=[tr["last"]])

    def do_print(self, world: World, loc: str, txn: str, i: int) -> None:
        tr = self.tr(world, txn)
        op = self.ops(world, txn)[i]
        ev = world.emit(f"{txn}:print{i}", Kind.LOCAL, loc, op.label, deps=[tr["last"]],
                        txn=txn, proto=False, info=f"print {evaluate(op.expr, tr['env'])!r}")
        tr["last"] = ev.id

    def on_res(self, world: World, loc: str, m: Message, ev) -> None:
        txn, n, env = m.payload
        tr = self.tr(world, txn)
        tr["env"] = dict(env)
        tr["last"] = ev.id
        plan = self.plan(world, txn)
        self._queue_prints(world, txn, plan.stages[n].prints)
        if n + 1 < len(plan.stages):
            world.add_work(loc, "req", txn, n + 1)
        else:
            world.add_work(loc, "commit", txn)

    def on_abort(self, world: World, loc: str, m: Message, ev) -> None:
        # the store retries by itself once the blocker is gone
        pass

    def do_commit(self, world: World, loc: str, txn: str, _) -> None:
        tr = self.tr(world, txn)
        plan = self.plan(world, txn)
        label = self.stage_label(world, txn, 0) if plan.stages else world.bottom
        ev = world.emit(f"{txn}:commit", Kind.COMMIT, loc, label, deps=[tr["last"]], txn=txn)
        tr["last"] = ev.id
        tr["committed"] = True
        seen: list[str] = []
        for st in reversed(plan.stages):
            if st.stores[0] not in seen:
                seen.append(st.stores[0])
        for s in seen:
            world.add_work(loc, "commit_send", txn, s)

    def do_commit_send(self, world: World, loc: str, txn: str, store: str) -> None:
        plan = self.plan(world, txn)
        first = next(n for n, st in enumerate(plan.stages) if st.stores[0] == store)
        world.send(f"{txn}:commit@{store}", loc, store, self.stage_label(world, txn, first),
                   "commit", txn, txn=txn, deps=[f"{txn}:commit"])

    # store side -----------------------------------------------------------

    def on_req(self, world: World, loc: str, m: Message, ev) -> None:
        txn, n, env = m.payload
        world.add_work(loc, "try", txn, (n, env, ev.id))

    def do_try(self, world: World, loc: str, txn: str, data) -> None:
        n, env, trigger = data
        ps = world.ps
        a = ps["attempts"].get((txn, n), 0)
        ops = self.ops(world, txn)
        st = self.plan(world, txn).stages[n]
        overlay = dict(env)
        values = dict(ps["values"])
        needed: list[int] = []
        modes: dict[str, str] = {}
        for i in st.accesses:
            op = ops[i]
            if not guards_hold(op, overlay):
                continue
            needed.append(i)
            if op.kind == "read":
                overlay[op.var] = values.get(op.field)
                modes.setdefault(op.field, "r")
            else:
                values[op.field] = evaluate(op.expr, overlay)
                modes[op.field] = "w"
        label = self.stage_label(world, txn, n)
        for fid, mode in modes.items():
            fs = self._field(ps, fid)
            blocker = self._blocker(fs, txn, mode)
            if blocker is None:
                continue
            hmode, hpc, hev = fs["holders"][blocker]
            key = f"{txn}:s{n}a{a}"
            abort = world.emit(f"{key}.abort", Kind.ABORT, loc, label, deps=[trigger, hev],
                               txn=txn, attempt=key, field=None,
                               cause=join(hpc, world.context.env.fields[fid].label))
            ps["attempts"][(txn, n)] = a + 1
            ps["waiters"][fid].append((blocker, txn, n, env))
            world.add_work(loc, "abort_send", txn, (n, a, abort.id))
            return
        for fid, mode in modes.items():
            self._field(ps, fid)["holders"][txn] = (mode, None, None)
        ps["exec"][txn] = {"stage": n, "attempt": a, "todo": needed, "env": dict(env),
                           "last": trigger}
        self._advance_stage(world, loc, txn)

    def do_cont(self, world: World, loc: str, txn: str, _) -> None:
        self._advance_stage(world, loc, txn)

    def _advance_stage(self, world: World, loc: str, txn: str) -> None:
        ps = world.ps
        ex = ps["exec"][txn]
        n, a = ex["stage"], ex["attempt"]
        key = f"{txn}:s{n}a{a}"
        if ex["todo"]:
            i = ex["todo"].pop(0)
            op = self.ops(world, txn)[i]
            fs = self._field(ps, op.field)
            mode = fs["holders"][txn][0]
            kind = Kind.READ if op.kind == "read" else Kind.WRITE
            ev = world.emit(f"{key}.op{i}", kind, loc, op.label,
                            deps=[ex["last"]] + self._rel_deps(fs, mode),
                            txn=txn, proto=False, field=op.field, attempt=key)
            if op.kind == "read":
                ex["env"][op.var] = ps["values"].get(op.field)
            else:
                ps["values"][op.field] = evaluate(op.expr, ex["env"])
            fs["holders"][txn] = (mode, op.pc if fs["holders"][txn][1] is None
                                  else join(fs["holders"][txn][1], op.pc), ev.id)
            ex["last"] = ev.id
            world.add_work(loc, "cont", txn)
        else:
            ev = world.emit(f"{key}.precommit", Kind.PRECOMMIT, loc,
                            self.stage_label(world, txn, n), deps=[ex["last"]], txn=txn)
            del ps["exec"][txn]
            world.add_work(loc, "result", txn, (n, a, ev.id, tuple(sorted(ex["env"].items()))))

    def do_result(self, world: World, loc: str, txn: str, data) -> None:
        n, a, pre, env = data
        world.send(f"{txn}:s{n}a{a}.res", loc, self.runner(world, txn),
                   self.stage_label(world, txn, n), "res", (txn, n, env), txn=txn, deps=[pre])

    def do_abort_send(self, world: World, loc: str, txn: str, data) -> None:
        n, a, abort = data
        world.send(f"{txn}:s{n}a{a}.abort", loc, self.runner(world, txn),
                   self.stage_label(world, txn, n), "abort", (txn, n), txn=txn, deps=[abort])

    def on_commit(self, world: World, loc: str, m: Message, ev) -> None:
        txn = m.payload
        ps = world.ps
        freed = []
        for fid, fs in sorted(ps["fields"].items()):
            if world.context.store_of(fid) != loc or txn not in fs["holders"]:
                continue
            mode = fs["holders"].pop(txn)[0]
            self._released(fs, mode, ev.id)
            freed.append(fid)
        for fid in freed:
            keep = []
            for blocker, waiter, n, env in ps["waiters"][fid]:
                if blocker == txn:
                    world.add_work(loc, "try", waiter, (n, env, ev.id))
                else:
                    keep.append((blocker, waiter, n, env))
            ps["waiters"][fid] = keep


# ---------------------------------------------------------------------------
# pessimistic locking


class PessimisticLocks(Base):
    name = "locks"

    def setup(self, world: World) -> None:
        wl: Workload = world.context
        for spec in world.txns.values():
            a = self.annotation(wl, spec.program)
            if not statically_monotonic(a):
                raise NonMonotonicTransaction(f"{spec.txn} ({spec.program}) is not monotonic")
        world.ps = {
            "values": dict(wl.values),
            "locks": {},
            "txns": {t: {"env": {}, "last": None, "i": 0, "held": [], "committed": False}
                     for t in world.txns},
        }

    def lock_of(self, world: World, label: Label) -> tuple[str, str]:
        """(lock id, home location) for a label."""
        env: Env = world.context.env
        homes = sorted(f.store for f in env.fields.values() if f.label == label)
        if not homes:
            homes = [l for l in world.loc_order if flows_to(label, world.locations[l])]
        return f"lock{label}", homes[0]

    def _lock(self, world: World, lock: str) -> dict:
        return world.ps["locks"].setdefault(lock, {"holder": None, "rel": None, "queue": []})

    def on_start(self, world: World, txn: str, ev) -> None:
        self.tr(world, txn)["last"] = ev.id
        self._advance(world, txn)

    def _advance(self, world: World, txn: str) -> None:
        """Decide the next action of a transaction without emitting anything."""
        tr = self.tr(world, txn)
        ops = self.ops(world, txn)
        runner = self.runner(world, txn)
        while tr["i"] < len(ops) and not guards_hold(ops[tr["i"]], tr["env"]):
            tr["i"] += 1
        if tr["i"] >= len(ops):
            world.add_work(runner, "commit", txn)
            return
        op = ops[tr["i"]]
        lock, home = self.lock_of(world, op.label)
        held = any(l == lock for l, _ in tr["held"])
        where = world.context.store_of(op.field) if op.is_access else runner
        if not held and home != where:
            if home == runner:
                self._request_lock(world, runner, txn, lock, ("local", tr["i"]))
            else:
                world.add_work(runner, "lock_send", txn, (tr["i"], lock, home))
            return
        if op.is_access:
            world.add_work(runner, "acc_send", txn, (tr["i"], not held))
        elif not held:
            self._request_lock(world, runner, txn, lock, ("local", tr["i"]))
        else:
            world.add_work(runner, "print", txn, tr["i"])

    def _request_lock(self, world: World, home: str, txn: str, lock: str, then) -> None:
        lk = self._lock(world, lock)
        item = (txn, then)
        if lk["holder"] in (None, txn):
            # reserve now: the acquire event is only emitted on a later step
            lk["holder"] = txn
            world.add_work(home, "acquire", txn, (lock, then, None))
        else:
            lk["queue"].append(item)

    def do_lock_send(self, world: World, loc: str, txn: str, data) -> None:
        i, lock, home = data
        world.send(f"{txn}:op{i}.lock", loc, home, self.ops(world, txn)[i].label, "lock",
                   (txn, i, lock), txn=txn, deps=[self.tr(world, txn)["last"]])

    def on_lock(self, world: World, loc: str, m: Message, ev) -> None:
        txn, i, lock = m.payload
        self._request_lock(world, loc, txn, lock, ("grant", i, ev.id))

    def do_acc_send(self, world: World, loc: str, txn: str, data) -> None:
        i, need = data
        op = self.ops(world, txn)[i]
        tr = self.tr(world, txn)
        world.send(f"{txn}:op{i}.req", loc, world.context.store_of(op.field), op.label, "acc",
                   (txn, i, need, tuple(sorted(tr["env"].items()))), txn=txn, deps=[tr["last"]])

    def on_acc(self, world: World, loc: str, m: Message, ev) -> None:
        txn, i, need, env = m.payload
        op = self.ops(world, txn)[i]
        if need:
            lock, _ = self.lock_of(world, op.label)
            self._request_lock(world, loc, txn, lock, ("access", i, env, ev.id))
        else:
            world.add_work(loc, "access", txn, (i, env, ev.id))

    def do_acquire(self, world: World, loc: str, txn: str, data) -> None:
        lock, then, released = data
        lk = self._lock(world, lock)
        deps = [released, lk["rel"]]
        if then[0] == "local":
            deps.append(self.tr(world, txn)["last"])
        else:
            deps.append(then[-1])
        lab = self.ops(world, txn)[then[1]].label
        ev = world.emit(f"{txn}:acq:{lock}", Kind.LOCK_ACQUIRE, loc, lab, deps=deps, txn=txn,
                        lock=lock)
        lk["holder"] = txn
        if then[0] == "local":
            tr = self.tr(world, txn)
            tr["held"].append((lock, loc))
            tr["last"] = ev.id
            world.add_work(loc, "print", txn, then[1])
        elif then[0] == "grant":
            world.add_work(loc, "grant_send", txn, (then[1], lock, ev.id))
        else:
            _, i, env, _ = then
            world.add_work(loc, "access", txn, (i, env, ev.id))

    def do_grant_send(self, world: World, loc: str, txn: str, data) -> None:
        i, lock, acq = data
        world.send(f"{txn}:op{i}.grant", loc, self.runner(world, txn),
                   self.ops(world, txn)[i].label, "grant", (txn, lock, loc), txn=txn, deps=[acq])

    def on_grant(self, world: World, loc: str, m: Message, ev) -> None:
        txn, lock, home = m.payload
        tr = self.tr(world, txn)
        tr["held"].append((lock, home))
        tr["last"] = ev.id
        self._advance(world, txn)

    def do_access(self, world: World, loc: str, txn: str, data) -> None:
        i, env, trigger = data
        op = self.ops(world, txn)[i]
        env = dict(env)
        kind = Kind.READ if op.kind == "read" else Kind.WRITE
        ev = world.emit(f"{txn}:op{i}", kind, loc, op.label, deps=[trigger], txn=txn,
                        proto=False, field=op.field)
        if op.kind == "read":
            val = world.ps["values"].get(op.field)
        else:
            val = evaluate(op.expr, env)
            world.ps["values"][op.field] = val
        lock, _ = self.lock_of(world, op.label)
        world.add_work(loc, "reply_send", txn, (i, ev.id, val, lock))

    def do_reply_send(self, world: World, loc: str, txn: str, data) -> None:
        i, acc, val, lock = data
        op = self.ops(world, txn)[i]
        world.send(f"{txn}:op{i}.res", loc, self.runner(world, txn), op.label, "res",
                   (txn, i, val, lock, loc), txn=txn, deps=[acc])

    def on_res(self, world: World, loc: str, m: Message, ev) -> None:
        txn, i, val, lock, home = m.payload
        tr = self.tr(world, txn)
        op = self.ops(world, txn)[i]
        if op.kind == "read":
            tr["env"][op.var] = val
        if not any(l == lock for l, _ in tr["held"]):
            tr["held"].append((lock, home))
        tr["last"] = ev.id
        tr["i"] = i + 1
        self._advance(world, txn)

    def do_print(self, world: World, loc: str, txn: str, i: int) -> None:
        tr = self.tr(world, txn)
        op = self.ops(world, txn)[i]
        ev = world.emit(f"{txn}:op{i}", Kind.LOCAL, loc, op.label, deps=[tr["last"]], txn=txn,
                        proto=False, info=f"print {evaluate(op.expr, tr['env'])!r}")
        tr["last"] = ev.id
        tr["i"] = i + 1
        self._advance(world, txn)

    def do_commit(self, world: World, loc: str, txn: str, _) -> None:
        tr = self.tr(world, txn)
        ev = world.emit(f"{txn}:commit", Kind.COMMIT, loc, self._commit_label(world, txn),
                        deps=[tr["last"]], txn=txn)
        tr["last"] = ev.id
        tr["committed"] = True
        self._after_commit(world, loc, txn, ev)
        order: list[str] = []
        for _, home in reversed(tr["held"]):
            if home not in order:
                order.append(home)
        for home in order:
            locks = [l for l, h in reversed(tr["held"]) if h == home]
            if home == loc:
                for l in locks:
                    world.add_work(loc, "release", txn, (l, ev.id))
            else:
                world.add_work(loc, "release_send", txn, (home, tuple(locks)))

    def _commit_label(self, world: World, txn: str) -> Label:
        # the commit sits on top of the chain, below what the runner may see
        held = self.tr(world, txn)["held"]
        ops = self.ops(world, txn)
        lab = world.bottom
        for o in ops:
            if any(l == self.lock_of(world, o.label)[0] for l, _ in held):
                lab = join(lab, o.label)
        return lab

    def _after_commit(self, world: World, loc: str, txn: str, ev) -> None:
        pass

    def do_release_send(self, world: World, loc: str, txn: str, data) -> None:
        home, locks = data
        world.send(f"{txn}:release@{home}", loc, home, self._release_label(world, locks),
                   "release", (txn, locks), txn=txn, deps=[f"{txn}:commit"])

    def _release_label(self, world: World, locks: Iterable[str]) -> Label:
        labs = [self._lock_label(world, l) for l in locks]
        return reduce(meet, labs)

    def _lock_label(self, world: World, lock: str) -> Label:
        for ev in reversed(world.schedule):
            if ev.lock == lock:
                return ev.label
        raise KeyError(lock)

    def on_release(self, world: World, loc: str, m: Message, ev) -> None:
        txn, locks = m.payload
        for l in locks:
            world.add_work(loc, "release", txn, (l, ev.id))

    def do_release(self, world: World, loc: str, txn: str, data) -> None:
        lock, trigger = data
        lk = self._lock(world, lock)
        prev = world.ps["txns"][txn].get("last_release", {}).get(loc)
        ev = world.emit(f"{txn}:rel:{lock}", Kind.LOCK_RELEASE, loc, self._lock_label(world, lock),
                        deps=[trigger, prev], txn=txn, lock=lock)
        world.ps["txns"][txn].setdefault("last_release", {})[loc] = ev.id
        lk["holder"] = None
        lk["rel"] = ev.id
        if lk["queue"]:
            nxt_txn, then = lk["queue"].pop(0)
            lk["holder"] = nxt_txn
            world.add_work(loc, "acquire", nxt_txn, (lock, then, ev.id))


class PreorderedLocks(PessimisticLocks):
    """Broken on purpose: a sequencer fixes the order before any start."""

    name = "preorder"

    def setup(self, world: World) -> None:
        super().setup(world)
        world.ps["go"] = {t: False for t in world.txns}
        world.ps["started"] = {t: False for t in world.txns}
        world.add_work(world.loc_order[0], "preorder", None)

    def do_preorder(self, world: World, loc: str, txn, _) -> None:
        ev = world.emit("seq:preorder", Kind.LOCAL, loc, world.bottom, info="preorder")
        order = sorted(world.txns)
        if order:
            world.add_work(loc, "go_send", order[0], (loc, ev.id))

    def do_go_send(self, world: World, loc: str, txn: str, data) -> None:
        _, dep = data
        # sequencer traffic belongs to no transaction
        world.send(f"seq:go:{txn}", loc, self.runner(world, txn), world.bottom, "go", txn,
                   txn=None, deps=[dep])

    def on_go(self, world: World, loc: str, m: Message, ev) -> None:
        txn = m.payload
        world.ps["go"][txn] = True
        if world.ps["started"][txn]:
            self.tr(world, txn)["last"] = ev.id
            self._advance(world, txn)

    def on_start(self, world: World, txn: str, ev) -> None:
        world.ps["started"][txn] = True
        self.tr(world, txn)["last"] = ev.id
        if world.ps["go"][txn]:
            self._advance(world, txn)

    def _after_commit(self, world: World, loc: str, txn: str, ev) -> None:
        order = sorted(world.txns)
        k = order.index(txn)
        if k + 1 < len(order):
            world.add_work(loc, "go_send", order[k + 1], (loc, ev.id))


# ---------------------------------------------------------------------------
# baseline two-phase commit


class TwoPhaseCommit(Base):
    name = "2pc"

    def setup(self, world: World) -> None:
        wl: Workload = world.context
        world.ps = {
            "values": dict(wl.values),
            "versions": {f: 0 for f in wl.env.fields},
            "writer_pc": {},
            "fields": {},
            "waiters": defaultdict(list),
            # retry notices that overtook the vote they answer
            "early_retry": {},
            "txns": {t: self._fresh(0) for t in world.txns},
        }

    @staticmethod
    def _fresh(attempt: int) -> dict:
        return {"attempt": attempt, "env": {}, "last": None, "i": 0, "reads": {}, "writes": {},
                "done": [], "parts": [], "pi": 0, "committed": False, "acks": 0,
                "waiting": False}

    def _field_label(self, world: World, fid: str) -> Label:
        return world.context.env.fields[fid].label

    def _loc(self, world: World, name: str) -> Label:
        return world.locations[name]

    def _txn_label(self, world: World, txn: str, store: Optional[str] = None) -> Label:
        tr = self.tr(world, txn)
        fids = set(tr["reads"]) | set(tr["writes"])
        if store is not None:
            fids = {f for f in fids if world.context.store_of(f) == store}
        labs = [self._field_label(world, f) for f in sorted(fids)] or [world.bottom]
        ends = [self._loc(world, self.runner(world, txn))]
        if store is not None:
            ends.append(self._loc(world, store))
        return visible(reduce(meet, labs), *ends)

    def on_start(self, world: World, txn: str, ev) -> None:
        self.tr(world, txn)["last"] = ev.id
        self._advance(world, txn)

    def _advance(self, world: World, txn: str) -> None:
        tr = self.tr(world, txn)
        ops = self.ops(world, txn)
        runner = self.runner(world, txn)
        while tr["i"] < len(ops):
            op = ops[tr["i"]]
            if not guards_hold(op, tr["env"]):
                tr["i"] += 1
                continue
            if op.kind == "read":
                if op.field in tr["writes"]:
                    tr["env"][op.var] = tr["writes"][op.field]
                    tr["done"].append(op.index)
                    tr["i"] += 1
                    continue
                world.add_work(runner, "fetch_send", txn, op.index)
                return
            if op.kind == "write":
                tr["writes"][op.field] = evaluate(op.expr, tr["env"])
            tr["done"].append(op.index)
            tr["i"] += 1
        fids = set(tr["reads"]) | set(tr["writes"])
        tr["parts"] = sorted({world.context.store_of(f) for f in fids})
        if tr["pi"] < len(tr["parts"]):
            world.add_work(runner, "prepare_send", txn, tr["pi"])
        else:
            world.add_work(runner, "commit", txn)

    def do_fetch_send(self, world: World, loc: str, txn: str, i: int) -> None:
        tr = self.tr(world, txn)
        op = self.ops(world, txn)[i]
        store = world.context.store_of(op.field)
        world.send(f"{txn}:a{tr['attempt']}.f{i}", loc, store,
                   visible(op.pc, self._loc(world, loc), self._loc(world, store)), "fetch",
                   (txn, i, op.field), txn=txn, deps=[tr["last"]])

    def on_fetch(self, world: World, loc: str, m: Message, ev) -> None:
        world.add_work(loc, "fetch_reply", m.txn, (m.payload, m.src, ev.id, m.id))

    def do_fetch_reply(self, world: World, loc: str, txn: str, data) -> None:
        (t, i, fid), runner, recv, mid = data
        ps = world.ps
        fs = self._field(ps, fid)
        world.send(f"{mid}.r", loc, runner,
                   visible(self._field_label(world, fid), self._loc(world, runner),
                           self._loc(world, loc)),
                   "fetched", (txn, i, ps["values"].get(fid), ps["versions"][fid]), txn=txn,
                   deps=[recv] + self._rel_deps(fs, "r"))

    def on_fetched(self, world: World, loc: str, m: Message, ev) -> None:
        txn, i, val, version = m.payload
        tr = self.tr(world, txn)
        op = self.ops(world, txn)[i]
        tr["env"][op.var] = val
        tr["reads"].setdefault(op.field, version)
        tr["done"].append(i)
        tr["last"] = ev.id
        tr["i"] = i + 1
        self._advance(world, txn)

    def _ops_at(self, world: World, txn: str, store: str) -> list[Op]:
        tr = self.tr(world, txn)
        ops = self.ops(world, txn)
        return [ops[i] for i in sorted(tr["done"])
                if ops[i].is_access and world.context.store_of(ops[i].field) == store]

    def do_prepare_send(self, world: World, loc: str, txn: str, k: int) -> None:
        tr = self.tr(world, txn)
        store = tr["parts"][k]
        reads = {f: v for f, v in tr["reads"].items() if world.context.store_of(f) == store}
        writes = {f: v for f, v in tr["writes"].items() if world.context.store_of(f) == store}
        pcs: dict[str, Label] = {}
        for op in self._ops_at(world, txn, store):
            pcs[op.field] = join(pcs[op.field], op.pc) if op.field in pcs else op.pc
        world.send(f"{txn}:a{tr['attempt']}.p@{store}", loc, store,
                   self._txn_label(world, txn, store), "prepare",
                   (txn, tr["attempt"], tuple(sorted(reads.items())),
                    tuple(sorted(writes.items())), tuple(sorted(pcs.items()))),
                   txn=txn, deps=[tr["last"]])

    def on_prepare(self, world: World, loc: str, m: Message, ev) -> None:
        world.add_work(loc, "vote", m.txn, (m.payload, m.src, ev.id, m.label))

    def do_vote(self, world: World, loc: str, txn: str, data) -> None:
        (t, a, reads, writes, pcs), runner, recv, label = data
        ps = world.ps
        modes = {f: "r" for f, _ in reads}
        modes.update({f: "w" for f, _ in writes})
        pcs = dict(pcs)
        verdict = ("yes", None, None)
        deps = [recv]
        for fid in sorted(modes):
            fs = self._field(ps, fid)
            blocker = self._blocker(fs, txn, modes[fid])
            if blocker is not None:
                hpc = fs["holders"][blocker][1]
                verdict = ("conflict", fid, join(hpc, self._field_label(world, fid)))
                ps["waiters"][fid].append((blocker, txn, runner, a))
                deps.append(fs["holders"][blocker][2])
                break
            if fid in dict(reads) and dict(reads)[fid] != ps["versions"][fid]:
                wpc = ps["writer_pc"].get(fid, world.bottom)
                verdict = ("stale", fid, join(wpc, self._field_label(world, fid)))
                deps += self._rel_deps(fs, "w")
                break
        if verdict[0] == "yes":
            for fid, mode in modes.items():
                fs = self._field(ps, fid)
                deps += self._rel_deps(fs, mode)
                fs["holders"][txn] = (mode, pcs.get(fid, world.bottom), recv)
        world.send(f"{txn}:a{a}.v@{loc}", loc, runner, label, "voted", (txn, a, verdict),
                   txn=txn, deps=deps)

    def on_voted(self, world: World, loc: str, m: Message, ev) -> None:
        txn, a, verdict = m.payload
        tr = self.tr(world, txn)
        tr["last"] = ev.id
        if verdict[0] == "yes":
            tr["pi"] += 1
            self._advance(world, txn)
        else:
            world.add_work(loc, "abort", txn, verdict)

    def do_abort(self, world: World, loc: str, txn: str, verdict) -> None:
        tr = self.tr(world, txn)
        reason, fid, cause = verdict
        a = tr["attempt"]
        key = f"{txn}:a{a}"
        early = world.ps["early_retry"].pop((txn, a), None)
        ev = world.emit(f"{key}.abort", Kind.ABORT, loc,
                        visible(self._field_label(world, fid), self._loc(world, loc)),
                        deps=[tr["last"], early], txn=txn, attempt=key, cause=cause, info=reason)
        label = self._txn_label(world, txn)
        parts = list(tr["parts"])
        fresh = self._fresh(a + 1)
        fresh["last"] = ev.id
        fresh["waiting"] = reason == "conflict" and early is None
        world.ps["txns"][txn] = fresh
        for s in parts:
            world.add_work(loc, "abort_send", txn, (s, a, ev.id, label))
        if not fresh["waiting"]:
            self._advance(world, txn)

    def do_abort_send(self, world: World, loc: str, txn: str, data) -> None:
        store, a, abort, label = data
        world.send(f"{txn}:a{a}.x@{store}", loc, store, visible(label, self._loc(world, store)),
                   "aborted", (txn, a), txn=txn, deps=[abort])

    def on_aborted(self, world: World, loc: str, m: Message, ev) -> None:
        txn, a = m.payload
        self._release_at(world, loc, txn, ev.id, rolled_back=True)

    def _release_at(self, world: World, loc: str, txn: str, ev_id: str, *,
                    rolled_back: bool, last: Optional[dict[str, str]] = None) -> None:
        ps = world.ps
        for fid, fs in sorted(ps["fields"].items()):
            if world.context.store_of(fid) != loc or txn not in fs["holders"]:
                continue
            mode = fs["holders"].pop(txn)[0]
            if not rolled_back:
                self._released(fs, mode, (last or {}).get(fid, ev_id))
            keep = []
            for blocker, waiter, runner, a in ps["waiters"][fid]:
                if blocker == txn:
                    world.add_work(loc, "retry_send", waiter, (runner, a, ev_id, fid))
                else:
                    keep.append((blocker, waiter, runner, a))
            ps["waiters"][fid] = keep

    def do_retry_send(self, world: World, loc: str, txn: str, data) -> None:
        runner, a, dep, fid = data
        world.send(f"{txn}:a{a}.retry", loc, runner,
                   visible(self._field_label(world, fid), self._loc(world, runner),
                           self._loc(world, loc)),
                   "retry", (txn, a), txn=txn, deps=[dep])

    def on_retry(self, world: World, loc: str, m: Message, ev) -> None:
        txn, a = m.payload
        tr = self.tr(world, txn)
        if tr["waiting"] and tr["attempt"] == a + 1:
            tr["waiting"] = False
            tr["last"] = ev.id
            self._advance(world, txn)
        elif tr["attempt"] == a:
            world.ps["early_retry"][(txn, a)] = ev.id

    def do_commit(self, world: World, loc: str, txn: str, _) -> None:
        tr = self.tr(world, txn)
        ev = world.emit(f"{txn}:commit", Kind.COMMIT, loc, self._txn_label(world, txn),
                        deps=[tr["last"]], txn=txn)
        tr["last"] = ev.id
        tr["committed"] = True
        for s in reversed(tr["parts"]):
            world.add_work(loc, "commit_send", txn, s)
        if not tr["parts"]:
            self._queue_prints(world, txn)

    def do_commit_send(self, world: World, loc: str, txn: str, store: str) -> None:
        tr = self.tr(world, txn)
        ops = tuple(o.index for o in self._ops_at(world, txn, store))
        writes = tuple(sorted((f, v) for f, v in tr["writes"].items()
                              if world.context.store_of(f) == store))
        world.send(f"{txn}:c@{store}", loc, store, self._txn_label(world, txn, store), "commit",
                   (txn, ops, writes, tuple(sorted(tr["env"].items()))), txn=txn,
                   deps=[f"{txn}:commit"])

    def on_commit(self, world: World, loc: str, m: Message, ev) -> None:
        txn, ops, writes, env = m.payload
        world.add_work(loc, "apply", txn, (list(ops), dict(writes), dict(env), ev.id, {}, m.src))

    def do_apply(self, world: World, loc: str, txn: str, data) -> None:
        todo, writes, env, recv, done, runner = data
        ps = world.ps
        ops = self.ops(world, txn)
        i = todo[0]
        op = ops[i]
        fs = self._field(ps, op.field)
        deps = [recv] + [done[p] for p in self._static_preds(ops, i) if p in done]
        if done:
            deps.append(done[max(done)])
        deps += self._rel_deps(fs, "w" if op.kind == "write" else "r")
        kind = Kind.READ if op.kind == "read" else Kind.WRITE
        ev = world.emit(f"{txn}:op{i}", kind, loc, op.label, deps=deps, txn=txn, proto=False,
                        field=op.field)
        if op.kind == "write":
            ps["values"][op.field] = evaluate(op.expr, env)
            ps["versions"][op.field] += 1
            ps["writer_pc"][op.field] = op.pc
        done = {**done, i: ev.id}
        if todo[1:]:
            world.add_work(loc, "apply", txn, (todo[1:], writes, env, recv, done, runner))
            return
        last = {}
        for j, eid in sorted(done.items()):
            last[ops[j].field] = eid
        self._release_at(world, loc, txn, ev.id, rolled_back=False, last=last)
        world.add_work(loc, "ack_send", txn, (runner, ev.id))

    @staticmethod
    def _static_preds(ops: tuple[Op, ...], i: int) -> set[int]:
        out: set[int] = set()
        stack = list(ops[i].preds)
        while stack:
            p = stack.pop()
            if p < 0 or p in out:
                continue
            out.add(p)
            stack.extend(ops[p].preds)
        return out

    def do_ack_send(self, world: World, loc: str, txn: str, data) -> None:
        runner, dep = data
        world.send(f"{txn}:k@{loc}", loc, runner, self._txn_label(world, txn, loc), "ack", txn,
                   txn=txn, deps=[dep])

    def on_ack(self, world: World, loc: str, m: Message, ev) -> None:
        txn = m.payload
        tr = self.tr(world, txn)
        tr["acks"] += 1
        tr["last"] = ev.id
        if tr["acks"] == len(tr["parts"]):
            self._queue_prints(world, txn)

    def _queue_prints(self, world: World, txn: str) -> None:
        tr = self.tr(world, txn)
        ops = self.ops(world, txn)
        for i in sorted(tr["done"]):
            if ops[i].kind == "print":
                world.add_work(self.runner(world, txn), "print", txn, i)

    def do_print(self, world: World, loc: str, txn: str, i: int) -> None:
        tr = self.tr(world, txn)
        op = self.ops(world, txn)[i]
        ev = world.emit(f"{txn}:op{i}", Kind.LOCAL, loc, op.label, deps=[tr["last"]], txn=txn,
                        proto=False, info=f"print {evaluate(op.expr, tr['env'])!r}")
        tr["last"] = ev.id


PROTOCOLS = {
    "2pc": TwoPhaseCommit,
    "locks": PessimisticLocks,
    "sc": StagedCommit,
    "preorder": PreorderedLocks,
}


def make_protocol(name: str) -> Base:
    try:
        return PROTOCOLS[name]()
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}") from None


# ---------------------------------------------------------------------------
# metrics


@dataclass
class TxnMetrics:
    stages_precommitted: int = 0
    prepare_round_trips: int = 0
    aborts: int = 0
    commits: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def protocol_metrics(execution: Execution, principals: Iterable[str]) -> dict:
    per: dict[str, TxnMetrics] = defaultdict(TxnMetrics)
    by_obs: Counter = Counter()
    obs = {p: Label.observer(p) for p in sorted(principals)}
    for e in execution.schedule:
        if e.txn is None:
            continue
        m = per[e.txn]
        if e.kind == Kind.PRECOMMIT:
            m.stages_precommitted += 1
            m.prepare_round_trips += 1
        elif e.kind == Kind.ABORT:
            m.aborts += 1
            if e.location != "" and ".s" in e.id:
                m.prepare_round_trips += 1
            for p, lab in obs.items():
                if flows_to(e.label, lab):
                    by_obs[p] += 1
        elif e.kind == Kind.COMMIT:
            m.commits += 1
        elif e.kind == Kind.SEND and e.info == "prepare":
            m.prepare_round_trips += 1
    return {
        "transactions": {t: m.to_json() for t, m in sorted(per.items())},
        "aborts_by_observer_label": {p: by_obs.get(p, 0) for p in obs},
        "commits": sum(m.commits for m in per.values()),
        "stages_precommitted": sum(m.stages_precommitted for m in per.values()),
        "prepare_round_trips": sum(m.prepare_round_trips for m in per.values()),
    }
