"""Seed sweep: serializability and protocol cost for every bundled scenario.

    python3 scripts/sweep.py --seeds 50 > sweep.csv
"""
import argparse
import csv
import sys

from sectx.model import is_serializable
from sectx.netsim import ProtocolRefused
from sectx.protocols import protocol_metrics
from sectx.scenarios import bundled_names, load_scenario

COLS = ["scenario", "protocol", "variant", "seed", "steps", "quiescent", "serializable",
        "commits", "aborts", "stages_precommitted", "prepare_round_trips"]


def row(s, proto, v, seed) -> dict:
    r = s.run(proto, seed, variant=v)
    m = protocol_metrics(r.execution, s.principals)
    return {"scenario": s.name, "protocol": proto, "variant": v, "seed": seed,
            "steps": r.steps, "quiescent": r.quiescent,
            "serializable": is_serializable(r.execution.state()),
            "commits": m["commits"],
            "aborts": sum(t["aborts"] for t in m["transactions"].values()),
            "stages_precommitted": m["stages_precommitted"],
            "prepare_round_trips": m["prepare_round_trips"]}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--protocols", default="2pc,locks,sc")
    args = ap.parse_args()

    w = csv.DictWriter(sys.stdout, COLS)
    w.writeheader()
    for name in bundled_names():
        s = load_scenario(name)
        for proto in args.protocols.split(","):
            try:
                rows = [row(s, proto, v, seed) for v in list(s.variants) or [None]
                        for seed in range(args.seeds)]
            except ProtocolRefused:
                print(f"# {name}/{proto} refused", file=sys.stderr)
                continue
            w.writerows(rows)

if __name__ == "__main__":
    main()
