import copy
import io
import json

import pytest

from sectx import cli
from sectx.lattice import Label
from sectx.scenarios import SchemaError, Scenario, bundled_names, load_scenario, save_scenario

BUNDLED = ["blog", "cloud_wall", "hospital_insecure", "hospital_secure", "rainforest"]


def raw(name="blog"):
    return load_scenario(name).to_json()


def run_cli(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), out)
    return code, out.getvalue()


def test_bundled_names():
    assert bundled_names() == BUNDLED


@pytest.mark.parametrize("name", BUNDLED)
def test_json_round_trip(name, tmp_path):
    s = load_scenario(name)
    assert Scenario.from_json(s.to_json()).to_json() == s.to_json()
    p = tmp_path / f"{name}.json"
    save_scenario(s, p)
    t = load_scenario(p)
    assert t.to_json() == s.to_json()
    assert t.run(t.protocol, 3).trace_lines() == s.run(s.protocol, 3).trace_lines()


def test_load_by_file_name_suffix():
    assert load_scenario("blog.json").name == "blog"


def test_views(hospital_secure):
    env = hospital_secure.env()
    assert set(env.fields) == set(hospital_secure.field_ids())
    assert set(hospital_secure.universe) == set(hospital_secure.principals)
    assert set(hospital_secure.values("hiv_positive")) <= set(hospital_secure.field_ids())
    assert [t.txn for t in hospital_secure.txn_specs(0)] == \
        [s.txn for s in hospital_secure.starts]


def _mutate(fn):
    d = raw()
    fn(d)
    return d


BAD = [
    ("schema", lambda d: d.pop("principals"), ""),
    ("extra-key", lambda d: d.update(bogus=1), ""),
    ("location", lambda d: d["stores"][0].update(location="mars"), "/stores/0/location"),
    ("principal", lambda d: d["programs"][0].update(principal="Mallory"),
     "/programs/0/principal"),
    ("label-principal",
     lambda d: d["stores"][0]["fields"][0]["label"]["readers"].append("Mallory"),
     "/stores/0/fields/0"),
    ("dup-field", lambda d: d["stores"][0]["fields"].append(
        copy.deepcopy(d["stores"][0]["fields"][0])), "/stores/0/fields/"),
    ("source", lambda d: d["programs"][0].update(source="atomic {"), "/programs/0/source"),
    ("window", lambda d: d["starts"][0].update(window=[5, 1]), "/starts/0/window"),
    ("delay", lambda d: d.update(network={"min_delay": 5, "max_delay": 2}), "/network"),
    ("variant", lambda d: d.update(variants={"v": {"nowhere.x": "1"}}), "/variants/v"),
    ("dup-txn", lambda d: d["starts"].append(copy.deepcopy(d["starts"][0])), "/starts/"),
    ("program", lambda d: d["starts"][0].update(program="ghost"), "/starts/0/program"),
    ("observer", lambda d: d.update(observer="Mallory"), "/observer"),
]


@pytest.mark.parametrize("case,fn,path", BAD, ids=[b[0] for b in BAD])
def test_schema_errors_carry_paths(case, fn, path):
    with pytest.raises(SchemaError) as exc:
        Scenario.from_json(_mutate(fn))
    assert exc.value.path.startswith(path)
    if path:
        assert str(exc.value).startswith(exc.value.path + ": ")


def test_invalid_json_and_missing_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ nope")
    with pytest.raises(SchemaError, match="invalid JSON"):
        load_scenario(p)
    with pytest.raises(SchemaError, match="no scenario"):
        load_scenario(tmp_path / "absent")


def test_writers_must_be_readers():
    d = raw()
    d["stores"][0]["fields"][0]["label"] = {"readers": ["Alice"], "writers": ["Alice", "Bob"]}
    with pytest.raises(SchemaError):
        Scenario.from_json(d)


def test_location_labels_parse():
    s = load_scenario("blog")
    assert s.locations["alice"] == Label.observer("Alice")


# -- command line -----------------------------------------------------------

def test_cli_check_exit_codes():
    code, out = run_cli("check", "hospital_insecure")
    assert code == 1 and json.loads(out)["scenario"] == "hospital_insecure"
    assert run_cli("check", "hospital_secure")[0] == 0


def test_cli_run_with_trace_and_metrics(tmp_path):
    trace = tmp_path / "t.jsonl"
    code, out = run_cli("run", "blog", "--seed", "4", "--variant", "fizz",
                        "--trace", str(trace), "--metrics")
    rep = json.loads(out)
    assert code == 0 and rep["serializable"] and rep["quiescent"] and "metrics" in rep
    lines = [json.loads(l) for l in trace.read_text().splitlines()]
    assert lines and all("id" in l["event"] for l in lines)
    assert [l["step"] for l in lines] == sorted(l["step"] for l in lines)


def test_cli_attack_demo():
    code, out = run_cli("attack-demo", "hospital_insecure", "--protocol", "2pc",
                        "--trials", "40")
    rep = json.loads(out)
    assert code == 1 and rep["verdict"] == "FAIL" and rep["diverging_step"] is not None
    code, out = run_cli("attack-demo", "hospital_secure", "--protocol", "sc", "--trials", "40")
    assert code == 0 and json.loads(out)["verdict"] == "PASS"


def test_cli_rod():
    assert run_cli("rod", "hospital_secure", "--seeds", "20")[0] == 0
    code, out = run_cli("rod", "hospital_insecure", "--protocol", "2pc", "--seeds", "20")
    assert code == 1 and json.loads(out)["verdict"] == "FAIL"


def test_cli_explore():
    code, out = run_cli("explore", "blog", "--variant", "fizz")
    assert code == 0 and all(r["non_serializable"] == 0 and r["stuck"] == 0
                                for r in json.loads(out)["reports"])
    code, out = run_cli("explore", "cloud_wall", "--impossibility", "--bound", "3")
    assert code == 0 and json.loads(out)["verdict"] == "PASS"


def test_cli_usage_errors(capsys):
    assert run_cli("check", "no_such_scenario")[0] == 2
    assert run_cli("run", "blog", "--protocol", "paxos")[0] == 2
    assert run_cli("run", "blog", "--variant", "nope")[0] == 2
    assert run_cli()[0] == 2


def test_cli_refused_pair():
    code, out = run_cli("run", "rainforest", "--protocol", "sc")
    assert code == 1 and "refused" in json.loads(out)
