"""Command line entry point.

Exit codes: 0 clean / PASS, 1 violations / FAIL, 2 usage or scenario errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .model import ExplorationBoundExceeded, is_serializable
from .netsim import ProtocolRefused
from .protocols import PROTOCOLS, protocol_metrics
from .scenarios import SchemaError, Scenario, load_scenario
from . import sectest

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _emit(obj, out) -> None:
    out.write(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def cmd_check(s: Scenario, args, out) -> int:
    reports = s.check()
    _emit({"scenario": s.name, "programs": [r.to_json() for r in reports]}, out)
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def cmd_run(s: Scenario, args, out) -> int:
    proto = args.protocol or s.protocol
    r = s.run(proto, args.seed, variant=args.variant, max_steps=args.max_steps)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for line in r.trace_lines():
                fh.write(line + "\n")
    ser = is_serializable(r.execution.state())
    rep = {"scenario": s.name, "protocol": proto, "seed": args.seed, "variant": args.variant,
           "steps": r.steps, "quiescent": r.quiescent, "committed": r.committed,
           "serializable": ser}
    if args.metrics:
        rep["metrics"] = protocol_metrics(r.execution, s.principals)
    _emit(rep, out)
    return EXIT_OK if ser and r.quiescent and not r.deadlock else EXIT_FAIL


def cmd_attack(s: Scenario, args, out) -> int:
    proto = args.protocol or s.protocol
    attacker = args.attacker or s.observer
    if attacker is None:
        raise SchemaError("no --attacker given and the scenario names no observer")
    rep = sectest.abort_channel_probe(s, proto, attacker, args.trials)
    d = {"scenario": s.name, "protocol": proto, **rep.to_json()}
    if not args.verbose:
        d["per_seed"] = [r for r in d["per_seed"] if any(v for k, v in r.items() if k != "seed")][:20]
    d["diverging_step"] = rep.first_divergence
    _emit(d, out)
    return EXIT_OK if rep.projection_divergences == 0 else EXIT_FAIL


def cmd_rod(s: Scenario, args, out) -> int:
    proto = args.protocol or s.protocol
    observer = args.observer or s.observer
    if observer is None:
        raise SchemaError("no --observer given and the scenario names no observer")
    rep = sectest.rod_check(s, proto, observer, seeds=range(args.seeds))
    d = {"scenario": s.name, "protocol": proto, **rep.to_json()}
    if not args.verbose:
        d["per_seed"] = [p for p in d["per_seed"] if not p["equal"]][:20]
    _emit(d, out)
    return EXIT_OK if rep.ok else EXIT_FAIL


def cmd_explore(s: Scenario, args, out) -> int:
    if args.impossibility:
        rep = sectest.impossibility_demo(args.bound or 6, s)
        _emit({"scenario": s.name, **rep.to_json()}, out)
        return EXIT_OK if rep.ok else EXIT_FAIL
    proto = args.protocol or s.protocol
    variants = [args.variant] if args.variant else (list(s.variants) or [None])
    reports = []
    for v in variants:
        reports += sectest.explore_scenario(s, proto, variant=v, max_events=args.bound or 16)
    _emit({"scenario": s.name, "protocol": proto, "bound": args.bound or 16,
           "reports": [r.to_json() for r in reports]}, out)
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sectx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    protos = sorted(PROTOCOLS)

    def scen(sp):
        sp.add_argument("scenario", help="scenario file or bundled name")
        return sp

    scen(sub.add_parser("check", help="static checks and stage plans"))

    r = scen(sub.add_parser("run", help="simulate one seed"))
    r.add_argument("--protocol", choices=protos)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--variant")
    r.add_argument("--trace", help="write newline-delimited JSON trace here")
    r.add_argument("--metrics", action="store_true")
    r.add_argument("--max-steps", type=int)

    a = scen(sub.add_parser("attack-demo", help="probe the abort channel"))
    a.add_argument("--protocol", choices=protos)
    a.add_argument("--attacker")
    a.add_argument("--trials", type=int, default=1000)
    a.add_argument("--verbose", action="store_true", help="list every seed")

    o = scen(sub.add_parser("rod", help="relaxed observational determinism over seeds"))
    o.add_argument("--protocol", choices=protos)
    o.add_argument("--observer")
    o.add_argument("--seeds", type=int, default=100)
    o.add_argument("--verbose", action="store_true", help="list every seed")

    e = scen(sub.add_parser("explore", help="exhaustive exploration"))
    e.add_argument("--protocol", choices=protos)
    e.add_argument("--variant")
    e.add_argument("--bound", type=int,
                   help="protocol events per transaction (default 16), or local inputs per "
                        "cloud with --impossibility (default 6)")
    e.add_argument("--impossibility", action="store_true",
                   help="search wall-respecting protocols for the cloud-wall transactions")
    return p


COMMANDS = {"check": cmd_check, "run": cmd_run, "attack-demo": cmd_attack, "rod": cmd_rod,
            "explore": cmd_explore}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        s = load_scenario(args.scenario)
        if args.cmd == "run" and args.variant and args.variant not in s.variants:
            raise SchemaError(f"unknown variant {args.variant!r}")
        return COMMANDS[args.cmd](s, args, out)
    except (SchemaError, sectest.InvalidExperiment) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolRefused as exc:
        _emit({"scenario": args.scenario, "refused": type(exc).__name__, "detail": str(exc)}, out)
        return EXIT_FAIL
    except ExplorationBoundExceeded as exc:
        _emit({"scenario": args.scenario, "bound_exceeded": str(exc)}, out)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
