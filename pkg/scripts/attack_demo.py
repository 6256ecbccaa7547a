"""Compare abort-channel leakage across protocols on the hospital scenarios.

    python3 scripts/attack_demo.py --trials 500
"""
import argparse

from sectx import sectest
from sectx.netsim import ProtocolRefused
from sectx.scenarios import load_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--attacker", default="Attacker")
    args = ap.parse_args()

    print(f"{'scenario':<20}{'protocol':<10}{'variant':<16}{'abort rate':>11}  verdict")
    for name in ("hospital_insecure", "hospital_secure"):
        s = load_scenario(name)
        for proto in ("2pc", "locks", "sc"):
            try:
                rep = sectest.abort_channel_probe(s, proto, args.attacker, args.trials)
            except ProtocolRefused as exc:
                print(f"{name:<20}{proto:<10}{'-':<16}{'-':>11}  refused ({type(exc).__name__})")
                continue
            verdict = "PASS" if rep.projection_divergences == 0 else "FAIL"
            for v, rate in rep.rates.items():
                print(f"{name:<20}{proto:<10}{v:<16}{rate:>11.3f}  {verdict}")


if __name__ == "__main__":
    main()
