"""A small transaction language: parser, pc/cl annotation and stage planning.

Grammar::

    source  := proc* 'atomic' '{' stmt* '}'
    proc    := 'proc' NAME '[' set ',' set ']' '{' stmt* '}'
    set     := '{' [NAME (',' NAME)*] '}'
    stmt    := NAME '=' 'read' '(' NAME '.' NAME ')' ';'
             | 'write' '(' NAME '.' NAME ',' expr ')' ';'
             | 'if' '(' NAME ['==' STRING] ')' '{' stmt* '}'
             | 'par' '{' stmt* '}' 'and' '{' stmt* '}'
             | 'print' '(' expr ')' ';'
             | 'call' NAME '(' ')' ';'
    expr    := NAME | STRING

``if (x)`` tests truthiness; ``if (x == "lit")`` compares with a string.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

from .lattice import (ConflictLabel, Label, StageOrder, conflict_label_of, flows_to,
                      join, stage_order)


class ParseError(ValueError):
    def __init__(self, msg: str, line: int = 0, col: int = 0, kind: str = "syntax"):
        super().__init__(f"{line}:{col}: {msg}")
        self.msg, self.line, self.col, self.kind = msg, line, col, kind


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Lit:
    value: str


Expr = Union[Var, Lit]


@dataclass(frozen=True)
class Read:
    var: str
    field: str
    line: int


@dataclass(frozen=True)
class Write:
    field: str
    expr: Expr
    line: int


@dataclass(frozen=True)
class If:
    var: str
    literal: Optional[str]
    body: tuple
    line: int


@dataclass(frozen=True)
class Par:
    left: tuple
    right: tuple
    line: int


@dataclass(frozen=True)
class Print:
    expr: Expr
    line: int


@dataclass(frozen=True)
class Call:
    name: str
    line: int


Stmt = Union[Read, Write, If, Par, Print, Call]


@dataclass(frozen=True)
class Procedure:
    name: str
    cl_min: frozenset[str]
    cl_max: frozenset[str]
    body: tuple
    line: int


@dataclass(frozen=True)
class Program:
    name: str
    principal: str
    location: str
    body: tuple
    procs: tuple[tuple[str, Procedure], ...] = ()
    source: str = ""

    def proc(self, name: str) -> Procedure:
        return dict(self.procs)[name]


# ---------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"""(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>//[^\n]*)
      |(?P<str>"(?:[^"\\\n]|\\.)*")|(?P<name>[A-Za-z_][A-Za-z0-9_]*)
      |(?P<op>==|[{}()\[\];,.=])|(?P<bad>.)""",
    re.VERBOSE,
)
KEYWORDS = {"atomic", "read", "write", "if", "par", "and", "print", "proc", "call"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks, line, start = [], 1, 0
    for m in _TOKEN.finditer(text):
        kind, s = m.lastgroup, m.group()
        col = m.start() - start + 1
        if kind == "nl":
            line, start = line + 1, m.end()
        elif kind in ("ws", "comment"):
            pass
        elif kind == "bad":
            raise ParseError(f"unexpected character {s!r}", line, col)
        else:
            if kind == "str":
                s = bytes(s[1:-1], "utf-8").decode("unicode_escape")
            elif kind == "name" and s in KEYWORDS:
                kind = "kw"
            toks.append(_Tok(kind, s, line, col))
    toks.append(_Tok("eof", "", line, m.end() - start + 1 if toks else 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, msg: str) -> ParseError:
        return ParseError(msg, self.tok.line, self.tok.col)

    def eat(self, text: str) -> _Tok:
        t = self.tok
        if t.text != text or t.kind == "str":
            raise self.fail(f"expected {text!r}, found {t.text or 'end of input'!r}")
        self.i += 1
        return t

    def name(self) -> str:
        t = self.tok
        if t.kind != "name":
            raise self.fail(f"expected a name, found {t.text or 'end of input'!r}")
        self.i += 1
        return t.text

    def field_ref(self) -> str:
        store = self.name()
        self.eat(".")
        return f"{store}.{self.name()}"

    def expr(self) -> Expr:
        t = self.tok
        if t.kind == "str":
            self.i += 1
            return Lit(t.text)
        return Var(self.name())

    def principal_set(self) -> frozenset[str]:
        self.eat("{")
        out = []
        if self.tok.text != "}":
            out.append(self.name())
            while self.tok.text == ",":
                self.i += 1
                out.append(self.name())
        self.eat("}")
        return frozenset(out)

    def block(self) -> tuple:
        self.eat("{")
        out = []
        while self.tok.text != "}":
            if self.tok.kind == "eof":
                raise self.fail("unterminated block")
            out.append(self.stmt())
        self.eat("}")
        return tuple(out)

    def stmt(self) -> Stmt:
        t = self.tok
        if t.kind == "name":
            var = self.name()
            self.eat("=")
            self.eat("read")
            self.eat("(")
            f = self.field_ref()
            self.eat(")")
            self.eat(";")
            return Read(var, f, t.line)
        if t.text == "write" and t.kind == "kw":
            self.i += 1
            self.eat("(")
            f = self.field_ref()
            self.eat(",")
            e = self.expr()
            self.eat(")")
            self.eat(";")
            return Write(f, e, t.line)
        if t.text == "if" and t.kind == "kw":
            self.i += 1
            self.eat("(")
            var = self.name()
            lit = None
            if self.tok.text == "==":
                self.i += 1
                if self.tok.kind != "str":
                    raise self.fail("expected a string literal after '=='")
                lit = self.tok.text
                self.i += 1
            self.eat(")")
            return If(var, lit, self.block(), t.line)
        if t.text == "par" and t.kind == "kw":
            self.i += 1
            left = self.block()
            self.eat("and")
            return Par(left, self.block(), t.line)
        if t.text == "print" and t.kind == "kw":
            self.i += 1
            self.eat("(")
            e = self.expr()
            self.eat(")")
            self.eat(";")
            return Print(e, t.line)
        if t.text == "call" and t.kind == "kw":
            self.i += 1
            n = self.name()
            self.eat("(")
            self.eat(")")
            self.eat(";")
            return Call(n, t.line)
        raise self.fail(f"unexpected {t.text or 'end of input'!r}")

    def source(self) -> tuple[tuple, dict[str, Procedure]]:
        procs: dict[str, Procedure] = {}
        while self.tok.text == "proc" and self.tok.kind == "kw":
            line = self.tok.line
            self.i += 1
            n = self.name()
            self.eat("[")
            lo = self.principal_set()
            self.eat(",")
            hi = self.principal_set()
            self.eat("]")
            if n in procs:
                raise ParseError(f"procedure {n!r} defined twice", line)
            if not lo <= hi:
                raise ParseError(f"procedure {n!r}: cl_min is not a subset of cl_max", line)
            procs[n] = Procedure(n, lo, hi, self.block(), line)
        self.eat("atomic")
        body = self.block()
        if self.tok.kind != "eof":
            raise self.fail("trailing input after atomic block")
        return body, procs


def _walk(stmts: Iterable) -> Iterable:
    for s in stmts:
        yield s
        if isinstance(s, If):
            yield from _walk(s.body)
        elif isinstance(s, Par):
            yield from _walk(s.left)
            yield from _walk(s.right)


def _vars(stmts: Iterable) -> tuple[set[str], set[str]]:
    """(assigned, used) variable names."""
    assigned, used = set(), set()
    for s in _walk(stmts):
        if isinstance(s, Read):
            assigned.add(s.var)
        elif isinstance(s, If):
            used.add(s.var)
        elif isinstance(s, (Write, Print)):
            e = s.expr
            if isinstance(e, Var):
                used.add(e.name)
    return assigned, used


def _well_formed(body: tuple, procs: Mapping[str, Procedure],
                 fields: Optional[Iterable[str]]) -> None:
    declared = set(fields) if fields is not None else None

    def check(stmts: tuple, defined: set[str], in_proc: bool) -> set[str]:
        for s in stmts:
            if isinstance(s, (Read, Write)) and declared is not None and s.field not in declared:
                raise ParseError(f"undeclared field {s.field!r}", s.line, kind="undeclared-field")
            if isinstance(s, Read):
                defined = defined | {s.var}
            elif isinstance(s, (Write, Print)):
                if isinstance(s.expr, Var) and s.expr.name not in defined:
                    raise ParseError(f"variable {s.expr.name!r} used before it is read", s.line,
                                     kind="guard")
            elif isinstance(s, If):
                if s.var not in defined:
                    raise ParseError(f"guard {s.var!r} is not a previously read variable",
                                     s.line, kind="guard")
                defined = defined | check(s.body, defined, in_proc)
            elif isinstance(s, Par):
                la, lu = _vars(s.left)
                ra, ru = _vars(s.right)
                if la & (ra | ru) or ra & lu:
                    raise ParseError("par branches share variables", s.line, kind="par-race")
                defined = check(s.left, defined, in_proc) | check(s.right, defined, in_proc)
            elif isinstance(s, Call):
                if in_proc:
                    raise ParseError("procedures may not call procedures", s.line)
                if s.name not in procs:
                    raise ParseError(f"unknown procedure {s.name!r}", s.line)
                defined = defined | check(procs[s.name].body, defined, True)
        return defined

    check(body, set(), False)


def parse_program(text: str, *, name: str = "main", principal: str = "",
                  location: str = "", fields: Optional[Iterable[str]] = None) -> Program:
    body, procs = _Parser(text).source()
    _well_formed(body, procs, fields)
    return Program(name, principal, location, body, tuple(sorted(procs.items())), text)


# ---------------------------------------------------------------------------
# environment supplied by a scenario


@dataclass(frozen=True)
class FieldInfo:
    label: Label
    store: str
    # name of the scenario label variable this label came from, if any
    label_var: Optional[str] = None


@dataclass(frozen=True)
class Env:
    universe: frozenset[str]
    fields: Mapping[str, FieldInfo]
    locations: Mapping[str, Label]


# ---------------------------------------------------------------------------
# pc annotation


@dataclass(frozen=True)
class Op:
    """One executable statement after flattening: read, write or print."""

    index: int
    kind: str
    line: int
    pc: Label
    guards: tuple[tuple[str, Optional[str]], ...]
    preds: tuple[int, ...]          # static hb predecessors; -1 is the start event
    field: Optional[str] = None
    var: Optional[str] = None
    expr: Optional[Expr] = None
    cl: Optional[ConflictLabel] = None
    label: Optional[Label] = None   # label of the event the op produces
    call: Optional[str] = None      # enclosing procedure, if inlined

    @property
    def is_access(self) -> bool:
        return self.kind in ("read", "write")

    def describe(self) -> str:
        if self.kind == "read":
            return f"{self.var} = read({self.field})"
        if self.kind == "write":
            return f"write({self.field})"
        return "print"


@dataclass(frozen=True)
class CallSite:
    name: str
    line: int
    pc: Label
    ops: tuple[int, ...]


@dataclass(frozen=True)
class PcAnnotation:
    program: Program
    ops: tuple[Op, ...]
    calls: tuple[CallSite, ...]
    # nesting used by the stage planner: ("seq", [...]) / ("par", l, r) / int
    shape: tuple

    def op_at_line(self, line: int) -> list[Op]:
        return [o for o in self.ops if o.line == line]


def annotate_pc(p: Program, env: Env) -> PcAnnotation:
    bottom = Label.bottom(env.universe)
    ops: list[Op] = []
    calls: list[CallSite] = []
    procs = dict(p.procs)

    def walk(stmts, pc, guards, frontier, var_labels, call):
        shape = []
        for s in stmts:
            if isinstance(s, Read):
                fl = env.fields[s.field].label
                o = Op(len(ops), "read", s.line, pc, guards, tuple(sorted(frontier)),
                       field=s.field, var=s.var, cl=conflict_label_of(fl), label=fl, call=call)
                ops.append(o)
                var_labels = {**var_labels, s.var: join(fl, pc)}
                frontier = {o.index}
                shape.append(o.index)
            elif isinstance(s, Write):
                fl = env.fields[s.field].label
                o = Op(len(ops), "write", s.line, pc, guards, tuple(sorted(frontier)),
                       field=s.field, expr=s.expr, cl=conflict_label_of(fl), label=fl, call=call)
                ops.append(o)
                frontier = {o.index}
                shape.append(o.index)
            elif isinstance(s, Print):
                o = Op(len(ops), "print", s.line, pc, guards, tuple(sorted(frontier)),
                       expr=s.expr, label=pc, call=call)
                ops.append(o)
                frontier = {o.index}
                shape.append(o.index)
            elif isinstance(s, If):
                inner = join(pc, var_labels.get(s.var, bottom))
                sub, body_front, var_labels = walk(s.body, inner, guards + ((s.var, s.literal),),
                                                   frontier, var_labels, call)
                frontier = body_front
                shape.extend(sub[1])
            elif isinstance(s, Par):
                ls, lf, lv = walk(s.left, pc, guards, frontier, var_labels, call)
                rs, rf, rv = walk(s.right, pc, guards, frontier, var_labels, call)
                var_labels = {**lv, **rv}
                frontier = lf | rf
                shape.append(("par", ls, rs))
            elif isinstance(s, Call):
                first = len(ops)
                sub, frontier, var_labels = walk(procs[s.name].body, pc, guards, frontier,
                                                 var_labels, s.name)
                calls.append(CallSite(s.name, s.line, pc, tuple(range(first, len(ops)))))
                shape.extend(sub[1])
        return ("seq", shape), frontier, var_labels

    shape, _, _ = walk(p.body, bottom, (), {-1}, {}, None)
    return PcAnnotation(p, tuple(ops), tuple(calls), shape)


@dataclass(frozen=True)
class Violation:
    kind: str
    line: int
    detail: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "line": self.line, "detail": self.detail}


def check_pc_constraint(a: PcAnnotation) -> list[Violation]:
    out = []
    for o in a.ops:
        if o.is_access and not flows_to(o.pc, o.cl.as_label()):
            out.append(Violation("pc", o.line,
                                 f"pc {o.pc} does not flow to cl {o.cl} at {o.describe()}"))
    for c in a.calls:
        proc = a.program.proc(c.name)
        hi = ConflictLabel(proc.cl_max)
        if not flows_to(c.pc, hi.as_label()):
            out.append(Violation("pc", c.line, f"pc {c.pc} does not flow to cl_max {hi} of {c.name}"))
        for i in c.ops:
            o = a.ops[i]
            if o.is_access and not (proc.cl_min <= o.cl.principals <= proc.cl_max):
                out.append(Violation("proc-bound", o.line,
                                     f"cl {o.cl} of {o.describe()} outside [{ConflictLabel(proc.cl_min)}, {hi}] of {c.name}"))
    return out


# ---------------------------------------------------------------------------
# stage planning


@dataclass(frozen=True)
class DynamicCl:
    """Placeholder for a cl that is only known once label variables are bound."""

    var: str
    principals: frozenset[str]   # the binding used when this plan was built

    def __str__(self) -> str:
        return f"${self.var}"


@dataclass(frozen=True)
class Stage:
    cl: ConflictLabel | DynamicCl
    accesses: tuple[int, ...]
    prints: tuple[int, ...] = ()
    coordinator: Optional[str] = None
    stores: tuple[str, ...] = ()

    def principals(self) -> frozenset[str]:
        return self.cl.principals


@dataclass(frozen=True)
class Stagepoint:
    position: int          # index of the first stage after the point
    left: str
    right: str
    dynamic: bool


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]
    stagepoints: tuple[Stagepoint, ...]
    order: tuple[int, ...]  # op indices in execution order

    def to_json(self, a: PcAnnotation) -> list[dict]:
        return [{"cl": sorted(s.principals()),
                 "accesses": [a.ops[i].describe() for i in s.accesses],
                 "coordinator": s.coordinator} for s in self.stages]


class StageOrderViolation(ValueError):
    def __init__(self, left, right, order: StageOrder, line: int = 0):
        self.left, self.right, self.order, self.line = left, right, order, line
        super().__init__(f"{order.value} cls {left} vs {right}")


def _cl_key(o: Op, dynamic: Mapping[str, str]):
    if o.field in dynamic:
        return DynamicCl(dynamic[o.field], o.cl.principals)
    return o.cl


def _cmp(a, b) -> StageOrder:
    if isinstance(a, DynamicCl) or isinstance(b, DynamicCl):
        return StageOrder.SAME if a == b else StageOrder.BEFORE
    return stage_order(a, b)


def _linearize(shape, a: PcAnnotation, dynamic: Mapping[str, str]) -> list[int]:
    if isinstance(shape, int):
        return [shape]
    if shape[0] == "seq":
        out: list[int] = []
        for s in shape[1]:
            out.extend(_linearize(s, a, dynamic))
        return out
    _, l, r = shape
    return _merge(_linearize(l, a, dynamic), _linearize(r, a, dynamic), a, dynamic)


def _chunks(seq: list[int], a: PcAnnotation) -> list[list[int]]:
    out: list[list[int]] = []
    for i in seq:
        if a.ops[i].is_access or not out:
            out.append([i])
        else:
            out[-1].append(i)
    return out


def _merge(left: list[int], right: list[int], a: PcAnnotation, dynamic) -> list[int]:
    """Interleave two parallel branches so that cls never increase."""
    lc, rc = _chunks(left, a), _chunks(right, a)

    def head_cl(ch):
        o = a.ops[ch[0]]
        return _cl_key(o, dynamic) if o.is_access else None

    out: list[int] = []
    while lc and rc:
        x, y = head_cl(lc[0]), head_cl(rc[0])
        if x is None:
            out.extend(lc.pop(0))
            continue
        if y is None:
            out.extend(rc.pop(0))
            continue
        if isinstance(x, DynamicCl) or isinstance(y, DynamicCl):
            out.extend(lc.pop(0))
            continue
        rel = stage_order(x, y)
        if rel in (StageOrder.BEFORE, StageOrder.SAME):
            out.extend(lc.pop(0))
        elif rel == StageOrder.AFTER:
            out.extend(rc.pop(0))
        else:
            raise StageOrderViolation(x, y, rel, a.ops[lc[0][0]].line)
    for ch in lc + rc:
        out.extend(ch)
    return out


def _coordinator(stage_ops: list[Op], cl: frozenset[str], p: Program, env: Env) -> Optional[str]:
    need = Label.of(cl)
    seen = []
    for o in stage_ops:
        loc = env.fields[o.field].store if o.is_access else p.location
        if loc not in seen:
            seen.append(loc)
    for loc in seen:
        if flows_to(need, env.locations[loc]):
            return loc
    return None


def _build(order: list[int], a: PcAnnotation, env: Env, dynamic: Mapping[str, str]) -> StagePlan:
    groups: list[tuple[object, list[int], list[int]]] = []
    pending_prints: list[int] = []
    for i in order:
        o = a.ops[i]
        if not o.is_access:
            if groups:
                groups[-1][2].append(i)
            else:
                pending_prints.append(i)
            continue
        key = _cl_key(o, dynamic)
        if groups and groups[-1][0] == key:
            groups[-1][1].append(i)
        else:
            groups.append((key, [i], []))
    if groups and pending_prints:
        groups[0][2][:0] = pending_prints

    stages, points = [], []
    for n, (key, acc, prints) in enumerate(groups):
        if n:
            prev = groups[n - 1][0]
            rel = _cmp(prev, key)
            dyn = isinstance(prev, DynamicCl) or isinstance(key, DynamicCl)
            if not dyn and rel != StageOrder.BEFORE:
                raise StageOrderViolation(prev, key, rel, a.ops[acc[0]].line)
            points.append(Stagepoint(n, str(prev), str(key), dyn))
        ops = [a.ops[i] for i in sorted(acc + prints, key=order.index)]
        coord = _coordinator(ops, key.principals, a.program, env)
        stores = tuple(sorted({env.fields[a.ops[i].field].store for i in acc}))
        stages.append(Stage(key, tuple(acc), tuple(prints), coord, stores))
    return StagePlan(tuple(stages), tuple(points), tuple(order))


def plan_stages(p: Program, a: PcAnnotation, env: Env) -> StagePlan:
    dynamic = {f: info.label_var for f, info in env.fields.items() if info.label_var}
    order = _linearize(a.shape, a, dynamic)
    return _build(order, a, env, dynamic)


def resolve_dynamic_stagepoints(plan: StagePlan, resolved_labels: Mapping[str, Label],
                                a: PcAnnotation, env: Env) -> StagePlan:
    """Bind label variables, merge stages whose cls turn out equal, re-check stage order."""
    stages: list[Stage] = []
    for s in plan.stages:
        cl = s.cl
        if isinstance(cl, DynamicCl):
            cl = conflict_label_of(resolved_labels[cl.var])
        if stages and stages[-1].cl == cl:
            last = stages[-1]
            stages[-1] = Stage(cl, last.accesses + s.accesses, last.prints + s.prints,
                               last.coordinator, tuple(sorted(set(last.stores) | set(s.stores))))
        else:
            stages.append(Stage(cl, s.accesses, s.prints, s.coordinator, s.stores))
    points = []
    out = []
    for n, s in enumerate(stages):
        if n:
            rel = stage_order(stages[n - 1].cl, s.cl)
            if rel != StageOrder.BEFORE:
                raise StageOrderViolation(stages[n - 1].cl, s.cl, rel, a.ops[s.accesses[0]].line)
            points.append(Stagepoint(n, str(stages[n - 1].cl), str(s.cl), False))
        ops = [a.ops[i] for i in sorted(s.accesses + s.prints, key=plan.order.index)]
        out.append(Stage(s.cl, s.accesses, s.prints,
                         _coordinator(ops, s.cl.principals, a.program, env), s.stores))
    return StagePlan(tuple(out), tuple(points), plan.order)


# ---------------------------------------------------------------------------
# one-stop checker


@dataclass
class CheckReport:
    program: str
    violations: list[Violation]
    annotation: Optional[PcAnnotation] = None
    plan: Optional[StagePlan] = None
    dynamic_checks: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"program": self.program,
                "violations": [v.to_json() for v in self.violations],
                "stages": self.plan.to_json(self.annotation) if self.plan else [],
                "dynamic_checks": self.dynamic_checks}


def check_program(p: Program, env: Env,
                  resolved_labels: Optional[Mapping[str, Label]] = None) -> CheckReport:
    a = annotate_pc(p, env)
    rep = CheckReport(p.name, check_pc_constraint(a), a)
    try:
        plan = plan_stages(p, a, env)
        rep.dynamic_checks = sum(sp.dynamic for sp in plan.stagepoints)
        if rep.dynamic_checks:
            labels = dict(resolved_labels or {})
            for info in env.fields.values():
                if info.label_var:
                    labels.setdefault(info.label_var, info.label)
            plan = resolve_dynamic_stagepoints(plan, labels, a, env)
    except StageOrderViolation as exc:
        rep.violations.append(Violation("stage-order", exc.line, str(exc)))
        return rep
    for n, s in enumerate(plan.stages):
        if s.coordinator is None:
            rep.violations.append(Violation(
                "coordinator", a.ops[s.accesses[0]].line,
                f"no location of stage {n} can receive aborts for cl {s.cl}"))
    rep.plan = plan
    return rep


def static_dag(a: PcAnnotation) -> dict[int, set[int]]:
    """Transitive static predecessors of every op (-1 stands for the start)."""
    anc: dict[int, set[int]] = {-1: set()}
    for o in a.ops:
        acc: set[int] = set()
        for p in o.preds:
            acc.add(p)
            acc |= anc[p]
        anc[o.index] = acc
    return anc


def statically_monotonic(a: PcAnnotation) -> bool:
    """Every pair of ops ordered and labels rising along the order."""
    anc = static_dag(a)
    for x in a.ops:
        for y in a.ops:
            if x.index < y.index and x.index not in anc[y.index]:
                return False
            if x.index in anc[y.index] and not flows_to(x.label, y.label):
                return False
    return True
