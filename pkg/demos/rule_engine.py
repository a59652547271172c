"""Interface-event rules on one ride, straight from the library.

The two left-ventricle rules ship with the package. This script parses
them, prints their ASTs, and evaluates them over a synthetic hill ride with
a sprint in the middle. It then shows how a malformed rule is reported,
with line and column.

Run:  python3 demos/rule_engine.py
"""

import numpy as np

from hse.knowledge import bundled_rules_path
from hse.personicle import Event, StreamSeries
from hse.rules import RuleSyntaxError, evaluate_rule, load_rules, parse_rules, pretty

from _rides import DAY0, hill_ride


def main() -> None:
    rules = load_rules(bundled_rules_path())
    for r in rules:
        print(f"{r.name} := {pretty(r.expr)}")
        print(f"    {r.expr!r}\n")

    cols = hill_ride(np.random.default_rng(3), ftp=240.0, mass_kg=70.0, grade_pct=7.0)
    cols["power"][1500:1512] = 700.0  # a 12 s sprint on the first climb
    cols["hr"][1500:1530] += np.linspace(0, 20, 30)
    t = DAY0 + np.arange(cols["power"].size)
    streams = {name: StreamSeries(name, "", t, cols[key])
               for name, key in (("HR", "hr"), ("Power", "power"), ("Altitude", "altitude"))}
    ride = Event("Cycling", "ride-1", int(t[0]), int(t[-1]))

    for r in rules:
        events = evaluate_rule(r, streams, [ride], (ride.start, ride.end))
        total = sum(e.duration for e in events)
        print(f"{r.name}: {len(events)} event(s), {total / 60:.1f} min")
        for e in events[:4]:
            print(f"    +{e.start - DAY0:>5}s .. +{e.end - DAY0:>5}s  "
                  + ", ".join(f"{k}={v:.1f}" for k, v in sorted(e.attributes.items())))
        if len(events) > 4:
            print(f"    ... {len(events) - 4} more")

    print()
    try:
        parse_rules("Ok := HR > 150\nBroken := (Power > 300 W ∧ detect-spike(HR)\n")
    except RuleSyntaxError as err:
        print(f"syntax error reported as: {err}")


if __name__ == "__main__":
    main()
