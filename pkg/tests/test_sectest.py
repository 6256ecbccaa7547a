import pytest
from hypothesis import given, settings, strategies as st

from sectx import sectest
from sectx.lattice import Label, flows_to
from sectx.model import Kind, is_serializable
from sectx.scenarios import Scenario


def public_pair():
    """Two transactions on disjoint public fields."""
    pub = {"readers": ["A", "B"], "writers": ["A", "B"]}
    return Scenario.from_json({
        "schema": 1, "name": "public", "principals": ["A", "B"],
        "locations": [{"id": "a", "label": {"readers": ["A"], "writers": []}},
                      {"id": "b", "label": {"readers": ["B"], "writers": []}}],
        "stores": [{"location": "a", "fields": [{"name": "x", "label": pub, "init": "0"},
                                                {"name": "y", "label": pub, "init": "0"}]}],
        "programs": [
            {"name": "px", "principal": "A", "location": "a",
             "source": "atomic { v = read(a.x); write(a.x, \"1\"); }"},
            {"name": "py", "principal": "B", "location": "b",
             "source": "atomic { v = read(a.y); write(a.y, \"1\"); }"}],
        "starts": [{"txn": "T1", "program": "px", "window": [0, 3]},
                   {"txn": "T2", "program": "py", "window": [0, 3]}],
        "variants": {"one": {}, "two": {}},
    })


def test_top_observer_sees_everything(blog):
    e = blog.run("sc", 1, variant="fizz").execution
    assert sectest.low_projection(e, Label.top()).events == e.schedule


def test_attacker_projection_hides_secret_events(hospital_secure):
    e = hospital_secure.run("sc", 2, variant="hiv_positive").execution
    p = sectest.low_projection(e, Label.observer("Attacker"))
    kept = set(p.ids())
    assert all(flows_to(x.label, p.observer) for x in p.events)
    secret = [x.id for x in e.schedule if x.field == "db.hiv" or (
        x.txn == "T1" and x.kind == Kind.LOCAL and x.info.startswith("print"))]
    assert secret and not kept & set(secret)
    # relative order is preserved
    pos = {x.id: i for i, x in enumerate(e.schedule)}
    assert [pos[i] for i in p.ids()] == sorted(pos[i] for i in p.ids())
    assert all(x.is_nie for x in p.nies)


def test_bottom_observer_keeps_only_bottom(hospital_secure):
    e = hospital_secure.run("sc", 2, variant="hiv_positive").execution
    bot = Label.bottom(hospital_secure.universe)
    p = sectest.low_projection(e, bot)
    assert all(x.label == bot for x in p.events)
    assert any(x.label == bot for x in e.schedule)


def test_rod_passes_for_sc(hospital_secure):
    rep = sectest.rod_check(hospital_secure, "sc", "Attacker", seeds=range(100))
    assert rep.ok and rep.diverging_step is None and len(rep.per_seed) == 100


def test_rod_fails_for_2pc_with_position(hospital_insecure):
    rep = sectest.rod_check(hospital_insecure, "2pc", "Attacker", seeds=range(30))
    assert rep.verdict == "FAIL"
    d = rep.diverging_step
    assert d["variants"] == ["hiv_positive", "hiv_negative"] and d["position"] >= 0
    assert d["left"] != d["right"]


def test_rod_is_symmetric(hospital_insecure):
    a = sectest.rod_check(hospital_insecure, "2pc", "Attacker", ["hiv_positive", "hiv_negative"],
                          range(20))
    b = sectest.rod_check(hospital_insecure, "2pc", "Attacker", ["hiv_negative", "hiv_positive"],
                          range(20))
    assert [p["equal"] for p in a.per_seed] == [p["equal"] for p in b.per_seed]
    assert a.verdict == b.verdict


def test_rod_public_transactions_pass_under_every_protocol():
    s = public_pair()
    for proto in ("2pc", "locks", "sc"):
        assert sectest.rod_check(s, proto, "A", seeds=range(20)).ok


def test_variants_visible_to_the_observer_are_rejected(hospital_secure):
    with pytest.raises(sectest.InvalidExperiment):
        sectest.rod_check(hospital_secure, "sc", "Hospital", seeds=range(2))


def test_rod_holds_for_every_observer_of_every_sc_scenario(hospital_secure, blog):
    for s in (hospital_secure, blog):
        env = s.env()
        for p in s.principals:
            obs = Label.observer(p)
            if any(flows_to(env.fields[f].label, obs) for v in s.variants.values() for f in v):
                continue
            assert sectest.rod_check(s, "sc", p, seeds=range(25)).ok, p


def test_probe_without_conflicts_sees_no_aborts():
    rep = sectest.abort_channel_probe(public_pair(), "2pc", "A", 30)
    assert rep.aborts == {"one": 0, "two": 0} and rep.rates == {"one": 0.0, "two": 0.0}


def test_probe_report_json(hospital_insecure):
    rep = sectest.abort_channel_probe(hospital_insecure, "2pc", "Attacker", 40)
    d = rep.to_json()
    assert d["verdict"] == "FAIL" and d["runs_with_abort"]["hiv_negative"] == 0
    assert 0 < d["abort_rate"]["hiv_positive"] <= 1
    assert len(d["per_seed"]) == 40


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["hospital_secure", "hospital_insecure", "blog", "rainforest",
                        "cloud_wall"]), st.integers(0, 5000))
def test_oracles_agree_on_runs(name, seed):
    from sectx.scenarios import load_scenario
    s = load_scenario(name)
    r = s.run(s.protocol, seed, variant=next(iter(s.variants), None))
    st_ = r.execution.state()
    assert is_serializable(st_) == sectest.serializable_oracle(st_) \
        == sectest.conflict_graph_acyclic(st_)
    assert sectest.unordered_conflicts(st_) == []


def test_confinement_detects_a_leaked_cause(hospital_insecure):
    # 2PC abort causes include the HIV label; Attacker's host is not entitled to it
    msgs = []
    for seed in range(40):
        e = hospital_insecure.run("2pc", seed, variant="hiv_positive").execution
        msgs += sectest.abort_confinement_violations(e, hospital_insecure.locations)
    assert msgs and all("attacker" in m for m in msgs)


def test_cloud_outcomes_match_brute_force():
    for bound in (1, 2, 3):
        assert sectest.cloud_outcome_sets(bound) == sectest.cloud_outcome_sets_bruteforce(bound)


def test_cloud_policy_counts():
    # one input, then wait-or-log: four policies in all, frozen from the brute force
    assert sum(sectest.cloud_outcome_sets(1).values()) == 4
    assert sum(sectest.cloud_outcome_sets(2).values()) == 256


def test_impossibility_report(cloud_wall):
    rep = sectest.impossibility_demo(4, cloud_wall)
    assert rep.ok
    assert rep.transaction_secure == {"TC": True, "TD": True}
    assert rep.relaxed_monotonic == {"TC": False, "TD": False}
    assert all(any("Incomparable" in d for d in ds) for ds in rep.checker.values())
    # no live single-order policy exists for one cloud on its own
    assert not any(r["live_and_single_order"] for r in rep.outcome_sets)
    assert rep.to_json()["verdict"] == "PASS"


def test_explore_scenario_covers_start_subsets(blog):
    reps = sectest.explore_scenario(blog, "sc", variant="fizz")
    assert [r.subset for r in reps] == [("T1",), ("T2",), ("T1", "T2")]
    assert all(r.ok for r in reps)
    assert reps[-1].necessary is not None and reps[0].necessary is None
