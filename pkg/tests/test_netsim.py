import json

import pytest
from hypothesis import given, settings, strategies as st

from sectx.lattice import Label
from sectx.model import Kind, is_serializable, transactions
from sectx.netsim import (NetworkPolicy, ProtocolBug, ScriptedEvent, ScriptedProtocol, TxnSpec,
                          World, max_steps_default, run_to_quiescence)
from sectx.scenarios import bundled_names, load_scenario

LOC = {"L": Label.top()}

# the red/blue pair: r0 r1 r2 and b0 b1 b2 with p between r1 and b1
R1 = ScriptedEvent("r1", ("r0",), "T1")
R2 = ScriptedEvent("r2", ("r1",), "T1")
P = ScriptedEvent("p", ("r1",))
B1 = ScriptedEvent("b1", ("b0", "p"), "T2")
B2 = ScriptedEvent("b2", ("b1",), "T2")


def _table(steps):
    return {frozenset(seen): nxt for seen, nxt in steps}


TOP = _table([
    ({"r0"}, R1),
    ({"r0", "r1"}, R2),
    ({"r0", "r1", "r2", "b0"}, P),
    ({"r0", "r1", "r2", "b0", "p"}, B1),
    ({"r0", "r1", "r2", "b0", "p", "b1"}, B2),
])
BOTTOM = _table([
    ({"r0", "b0"}, R1),
    ({"r0", "b0", "r1"}, P),
    ({"r0", "b0", "r1", "p"}, B1),
    ({"r0", "b0", "r1", "p", "b1"}, B2),
    ({"r0", "b0", "r1", "p", "b1", "b2"}, R2),
])


def replay(table, blue_start):
    txns = [TxnSpec("T1", "red", "L", 0, "r0"), TxnSpec("T2", "blue", "L", blue_start, "b0")]
    return run_to_quiescence(World(LOC, ScriptedProtocol("L", table), txns))


def test_scripted_replay_reproduces_both_executions():
    top = replay(TOP, 1)
    bottom = replay(BOTTOM, 0)
    assert [e.id for e in top.execution.schedule] == ["r0", "r1", "r2", "b0", "p", "b1", "b2"]
    assert [e.id for e in bottom.execution.schedule] == ["r0", "b0", "r1", "p", "b1", "b2", "r2"]
    assert top.quiescent and bottom.quiescent
    # different protocols, equal final states
    assert top.execution.state().key() == bottom.execution.state().key()
    st_ = top.execution.state()
    ts = transactions(st_)
    assert is_serializable(st_) and set(ts) == {"T1", "T2"}
    assert [e.kind for e in top.execution.schedule if e.is_nie] == [Kind.START, Kind.START]


def test_due_start_is_scheduled_first():
    r = replay(TOP, 1)
    assert r.execution.schedule[0].id == "r0"
    assert r.execution.schedule[0].kind == Kind.START


def test_empty_world_is_immediately_quiescent():
    r = run_to_quiescence(World(LOC, ScriptedProtocol("L", {}), []))
    assert r.quiescent and r.steps == 0 and r.execution.schedule == ()
    assert not r.deadlock


def test_schedule_is_linear_extension():
    assert replay(BOTTOM, 0).execution.is_linear_extension()


@pytest.mark.parametrize("bad,msg", [
    (ScriptedEvent("r1", ("nope",), "T1"), "unscheduled"),
    (ScriptedEvent("r0", (), "T1"), "duplicate"),
])
def test_protocol_bugs_are_reported(bad, msg):
    table = {frozenset({"r0"}): bad}
    with pytest.raises(ProtocolBug, match=msg):
        run_to_quiescence(World(LOC, ScriptedProtocol("L", table), [TxnSpec("T1", "x", "L", 0, "r0")]))


def test_event_label_must_fit_location():
    locs = {"L": Label({"A"}, ())}
    table = {frozenset({"r0"}): ScriptedEvent("r1", ("r0",), "T1", Label({"B"}, ()))}
    with pytest.raises(ProtocolBug, match="cannot occur"):
        run_to_quiescence(World(locs, ScriptedProtocol("L", table),
                                [TxnSpec("T1", "x", "L", 0, "r0")], universe={"A", "B"}))


def test_network_delay_is_seeded_and_bounded():
    pol = NetworkPolicy(2, 5)
    ds = [pol.delay(7, f"m{i}") for i in range(200)]
    assert all(2 <= d <= 5 for d in ds)
    assert ds == [pol.delay(7, f"m{i}") for i in range(200)]
    assert len(set(ds)) > 1


def test_max_steps_env_override(monkeypatch):
    monkeypatch.setenv("SECTX_MAX_STEPS", "17")
    assert max_steps_default() == 17
    monkeypatch.delenv("SECTX_MAX_STEPS")
    assert max_steps_default() == 5000


def test_step_cap_reports_unfinished_run(hospital_secure):
    r = hospital_secure.run("sc", 0, variant="hiv_positive", max_steps=5)
    assert r.steps == 5 and not r.quiescent
    assert r.deadlock


SCEN_PROTO = [(n, load_scenario(n).protocol) for n in bundled_names()]


@pytest.mark.parametrize("name,proto", SCEN_PROTO)
def test_same_seed_same_trace(name, proto):
    s = load_scenario(name)
    v = next(iter(s.variants), None)
    for seed in range(0, 100, 9):
        a = s.run(proto, seed, variant=v).trace_lines()
        b = s.run(proto, seed, variant=v).trace_lines()
        assert a == b


def test_trace_records_have_the_documented_keys(blog):
    lines = blog.run("sc", 3, variant="fizz").trace_lines()
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "time", "event", "hb_new_edges"}
    assert {"id", "kind", "loc", "label", "txn"} <= set(rec["event"])
    assert [json.loads(l)["step"] for l in lines] == list(range(1, len(lines) + 1))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([n for n, _ in SCEN_PROTO]), st.integers(0, 10_000))
def test_messages_are_ordered_send_delay_receive(name, seed):
    s = load_scenario(name)
    r = s.run(s.protocol, seed, variant=next(iter(s.variants), None))
    st_ = r.execution.state()
    for e in r.execution.schedule:
        if e.kind == Kind.RECEIVE:
            delay = f"{e.msg}/delay"
            assert delay in st_.ancestors(e.id)
            assert f"{e.msg}/send" in st_.ancestors(delay)
            d = st_.events[delay]
            assert (d.label, d.location) == (e.label, e.location)
    assert r.execution.is_linear_extension()
    assert r.quiescent and all(r.committed.values())
