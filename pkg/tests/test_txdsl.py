import pytest
from hypothesis import given, strategies as st

from sectx.lattice import ConflictLabel, Label, StageOrder, flows_to
from sectx.txdsl import (Env, FieldInfo, If, Par, ParseError, Print, Read, StageOrderViolation,
                         Write, annotate_pc, check_pc_constraint, check_program, parse_program,
                         plan_stages, resolve_dynamic_stagepoints, statically_monotonic)

HOSP = frozenset({"Hospital", "Patsy", "Attacker"})
H = Label.of({"Hospital", "Patsy"})
L = Label.of(HOSP)
BLOG = frozenset({"Alice", "Bob", "Carol"})
POST = Label.of(BLOG)
COMMENT = Label.of({"Alice", "Carol"})


def hosp_env():
    locs = {"db": Label.of({"Hospital"}), "patsy": Label.of({"Patsy"}),
            "attacker": Label.of({"Attacker"})}
    locs = {k: Label(v.readers, ()) for k, v in locs.items()}
    return Env(HOSP, {"db.hiv": FieldInfo(H, "db"), "db.address": FieldInfo(L, "db")}, locs)


def blog_env():
    locs = {p.lower(): Label({p}, ()) for p in BLOG}
    return Env(BLOG, {"alice.post": FieldInfo(POST, "alice"),
                      "alice.comment": FieldInfo(COMMENT, "alice")}, locs)


INSECURE = """atomic {
  h = read(db.hiv);
  if (h) {
    x = read(db.address);
    print(x);
  }
}
"""

SECURE = """atomic {
  par { h = read(db.hiv); } and { x = read(db.address); }
  if (h) { print(x); }
}
"""

COMMENT_SRC = """atomic {
  p = read(alice.post);
  if (p == "fizz") {
    write(alice.comment, "buzz");
  }
  if (p == "buzz") { write(alice.comment, "fizz"); }
}
"""


def parse(src, **kw):
    return parse_program(src, name="t", principal="Patsy", location="patsy", **kw)


def test_secure_patsy_parses_to_two_statements_with_par_and_if():
    p = parse(SECURE)
    assert [type(s) for s in p.body] == [Par, If]
    par, cond = p.body
    assert isinstance(par.left[0], Read) and isinstance(par.right[0], Read)
    assert isinstance(cond.body[0], Print)


def test_empty_atomic_block():
    assert parse("atomic { }").body == ()


def test_comment_program_has_two_conditional_writes():
    p = parse(COMMENT_SRC)
    ifs = [s for s in p.body if isinstance(s, If)]
    assert len(ifs) == 2
    assert [s.literal for s in ifs] == ["fizz", "buzz"]
    assert all(isinstance(s.body[0], Write) for s in ifs)


@pytest.mark.parametrize("src,kind", [
    ("atomic { x = read(db.nope); }", "undeclared-field"),
    ("atomic { if (h) { print(h); } }", "guard"),
    ("atomic { print(x); }", "guard"),
    ("atomic { par { h = read(db.hiv); } and { print(h); } }", "par-race"),
    ("atomic { x = read(db.hiv) }", "syntax"),
    ("atomic { write(db.hiv, 'a'); }", "syntax"),
])
def test_parse_errors(src, kind):
    with pytest.raises(ParseError) as exc:
        parse(src, fields=["db.hiv", "db.address"])
    assert exc.value.kind == kind
    assert exc.value.line == 1


def test_parse_error_reports_line_and_column():
    with pytest.raises(ParseError) as exc:
        parse("atomic {\n  x = read(db.hiv);\n  oops;\n}")
    assert exc.value.line == 3 and exc.value.col > 0


def test_pc_annotation_of_comment_program():
    a = annotate_pc(parse(COMMENT_SRC), blog_env())
    bottom = Label.bottom(BLOG)
    read, w1, w2 = a.ops
    assert read.pc == bottom and read.cl == ConflictLabel(BLOG)
    assert w1.line == 4 and w1.pc == POST and w1.cl == ConflictLabel({"Alice", "Carol"})
    assert w2.pc == POST
    assert check_pc_constraint(a) == []


def test_insecure_patsy_violates_at_address_read():
    a = annotate_pc(parse(INSECURE), hosp_env())
    vs = check_pc_constraint(a)
    assert [(v.kind, v.line) for v in vs] == [("pc", 4)]
    assert "Attacker" in vs[0].detail


def test_secure_patsy_has_no_pc_violations():
    assert check_pc_constraint(annotate_pc(parse(SECURE), hosp_env())) == []


def test_secure_patsy_plan_puts_address_first():
    p = parse(SECURE)
    a = annotate_pc(p, hosp_env())
    plan = plan_stages(p, a, hosp_env())
    assert [s.principals() for s in plan.stages] == [HOSP, frozenset({"Hospital", "Patsy"})]
    assert [a.ops[i].field for i in plan.stages[0].accesses] == ["db.address"]
    assert [a.ops[i].field for i in plan.stages[1].accesses] == ["db.hiv"]
    # the print rides with the trusted stage
    assert plan.stages[1].prints and a.ops[plan.stages[1].prints[0]].kind == "print"
    assert plan.stages[0].coordinator == "db"


def test_comment_plan_has_two_stages_in_superset_order():
    p = parse(COMMENT_SRC)
    env = blog_env()
    plan = plan_stages(p, annotate_pc(p, env), env)
    assert [s.principals() for s in plan.stages] == [BLOG, frozenset({"Alice", "Carol"})]
    for x, y in zip(plan.stages, plan.stages[1:]):
        assert x.principals() > y.principals()


def test_incomparable_cls_are_rejected():
    env = Env(frozenset({"Outel", "Bank", "Gloria"}),
              {"outel.inventory": FieldInfo(Label.of({"Outel"}), "outel"),
               "bank.gloria": FieldInfo(Label({"Bank", "Gloria"}, {"Bank"}), "bank")},
              {"outel": Label({"Outel"}, ()), "bank": Label({"Bank"}, ())})
    p = parse("atomic { i = read(outel.inventory); write(outel.inventory, i); "
              "b = read(bank.gloria); write(bank.gloria, b); }")
    with pytest.raises(StageOrderViolation) as exc:
        plan_stages(p, annotate_pc(p, env), env)
    assert exc.value.order is StageOrder.INCOMPARABLE
    assert str(exc.value) == "Incomparable cls {Outel} vs {Bank,Gloria}"
    rep = check_program(p, env)
    assert not rep.ok and rep.violations[0].kind == "stage-order"


def test_rising_cls_are_rejected():
    p = parse("atomic { h = read(db.hiv); x = read(db.address); }")
    rep = check_program(p, hosp_env())
    assert any(v.kind == "stage-order" and v.detail.startswith("After") for v in rep.violations)


def test_single_cl_program_is_one_stage():
    p = parse("atomic { x = read(db.address); write(db.address, x); }")
    rep = check_program(p, hosp_env())
    assert rep.ok and len(rep.plan.stages) == 1


def _dynamic_env(binding: Label):
    env = hosp_env()
    fields = dict(env.fields)
    fields["db.note"] = FieldInfo(binding, "db", "N")
    return Env(env.universe, fields, env.locations)


def test_dynamic_stagepoint_merges_when_labels_match():
    src = "atomic { x = read(db.address); n = read(db.note); }"
    env = _dynamic_env(L)
    p = parse(src)
    a = annotate_pc(p, env)
    plan = plan_stages(p, a, env)
    assert len(plan.stages) == 2 and plan.stagepoints[0].dynamic
    merged = resolve_dynamic_stagepoints(plan, {"N": L}, a, env)
    assert len(merged.stages) == 1 and merged.stagepoints == ()
    split = resolve_dynamic_stagepoints(plan, {"N": H}, a, env)
    assert [s.principals() for s in split.stages] == [HOSP, frozenset({"Hospital", "Patsy"})]


def test_dynamic_resolution_can_fail():
    # found by enumerating bindings over the three principals: {Attacker} is
    # incomparable with the address cl's proper subsets but not a subset itself
    src = "atomic { h = read(db.hiv); n = read(db.note); }"
    env = _dynamic_env(L)
    p = parse(src)
    a = annotate_pc(p, env)
    plan = plan_stages(p, a, env)
    with pytest.raises(StageOrderViolation) as exc:
        resolve_dynamic_stagepoints(plan, {"N": Label.of({"Attacker"})}, a, env)
    assert exc.value.order is StageOrder.INCOMPARABLE
    rep = check_program(p, env, {"N": Label.of({"Attacker"})})
    assert [v.kind for v in rep.violations] == ["stage-order"]


def test_static_plan_is_unchanged_by_resolution():
    p = parse(SECURE)
    env = hosp_env()
    a = annotate_pc(p, env)
    plan = plan_stages(p, a, env)
    again = resolve_dynamic_stagepoints(plan, {}, a, env)
    assert [s.principals() for s in again.stages] == [s.principals() for s in plan.stages]


def test_procedure_bounds_are_checked_at_call_sites():
    src = ("proc addr [{Attacker,Hospital,Patsy}, {Attacker,Hospital,Patsy}] "
           "{ x = read(db.address); }\n"
           "proc narrow [{Hospital}, {Hospital}] { y = read(db.address); }\n"
           "atomic { call addr(); h = read(db.hiv); if (h) { call narrow(); } }")
    a = annotate_pc(parse(src), hosp_env())
    vs = check_pc_constraint(a)
    # narrow's cl_max admits pc H, but the address read inside it does not,
    # and its cl lies outside the declared bounds
    assert sorted((v.kind, v.line) for v in vs) == [("pc", 2), ("proc-bound", 2)]


def test_call_under_secret_guard_violates_cl_max():
    src = ("proc addr [{Attacker,Hospital,Patsy}, {Attacker,Hospital,Patsy}] "
           "{ x = read(db.address); }\n"
           "atomic { h = read(db.hiv); if (h) { call addr(); } }")
    a = annotate_pc(parse(src), hosp_env())
    details = [v.detail for v in check_pc_constraint(a) if v.kind == "pc"]
    assert any("cl_max" in d for d in details)
    assert a.calls[0].pc == H


def test_monotonicity_of_programs():
    env = hosp_env()
    assert not statically_monotonic(annotate_pc(parse(SECURE), env))
    chain = parse("atomic { x = read(db.address); h = read(db.hiv); if (h) { print(x); } }")
    assert statically_monotonic(annotate_pc(chain, env))


GUARD_FIELDS = ["db.hiv", "db.address"]


@given(st.lists(st.sampled_from(GUARD_FIELDS), min_size=1, max_size=3),
       st.sampled_from(GUARD_FIELDS))
def test_adding_a_guard_never_removes_violations(guards, target):
    env = hosp_env()
    reads = " ".join(f"g{i} = read({f});" for i, f in enumerate(guards))
    body = f"t = read({target});"
    plain = parse(f"atomic {{ {reads} {body} }}")
    guarded = parse(f"atomic {{ {reads} if (g0) {{ {body} }} }}")
    before = {v.detail.split(" at ")[1] for v in check_pc_constraint(annotate_pc(plain, env))}
    after = {v.detail.split(" at ")[1] for v in check_pc_constraint(annotate_pc(guarded, env))}
    assert before <= after


@given(st.lists(st.sampled_from(["db.hiv", "db.address"]), min_size=1, max_size=5))
def test_accepted_plans_have_strictly_shrinking_cls(fields):
    env = hosp_env()
    p = parse("atomic { " + " ".join(f"v{i} = read({f});" for i, f in enumerate(fields)) + " }")
    rep = check_program(p, env)
    if rep.plan is not None:
        cls = [s.principals() for s in rep.plan.stages]
        assert all(x > y for x, y in zip(cls, cls[1:]))
        for s in rep.plan.stages:
            for i in s.accesses:
                assert flows_to(rep.annotation.ops[i].pc, s.cl.as_label())
