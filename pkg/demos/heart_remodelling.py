"""Volume versus pressure overload: two four-week blocks, two hearts.

Athlete A rides long, steady sessions with heart rate above 140 bpm, which
fires the ``VolOverload`` rule. Athlete B does short sessions of repeated
650 W sprints, which fire ``PressOverload`` through heart-rate spikes and
power above 400 W. The update cycle routes each rule's daily minutes into
the left-ventricle gene-expression nodes. The healthy (PI3K/Akt) branch
should dominate for A and the pathological (AngII/calcineurin) branch for B.

Run:  python3 demos/heart_remodelling.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from _rides import DAY0, hse, table, write_ride

DAYS = 28


def steady(n=3600):
    return {"hr": np.full(n, 150.0), "power": np.full(n, 250.0), "altitude": np.full(n, 30.0)}


def sprints(n=3600):
    k = np.arange(n)
    burst = (k % 120) < 10
    return {"hr": np.where(burst, 130.0, 105.0), "power": np.where(burst, 650.0, 150.0),
            "altitude": np.full(n, 30.0)}


def run(kind: str, tmp: Path) -> list[dict]:
    store = tmp / kind
    profile = tmp / "profile.json"
    profile.write_text(json.dumps({"mass_kg": 62, "age_years": 28, "hr_rest": 50}))
    hse("--store", store, "init", "--intent", "cycling", "--profile", profile)
    make = steady if kind == "volume" else sprints
    rides = [write_ride(tmp / f"{kind}{d:02d}.csv", make(), DAY0 + d * 86400 + 8 * 3600)
             for d in range(DAYS) if d % 7 != 6]
    hse("--store", store, "ingest", *rides)
    daily = table(hse("--store", store, "update", "--from", "2024-05-01", "--to", "2024-05-28"))
    heart = table(hse("--store", store, "query", "heart", "--from", "2024-05-01", "--to", "2024-05-28"))
    for d, h in zip(daily, heart):
        h.update(vol=d["VolOverload_min"], press=d["PressOverload_min"])
    return heart


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        a, b = run("volume", tmp), run("pressure", tmp)
    print(f"{'':10} {'volume block':^36} | {'pressure block':^36}")
    print(f"{'date':10} {'vol min':>8} {'healthy':>8} {'patho':>8} {'net':>8} | "
          f"{'press min':>9} {'healthy':>8} {'patho':>8} {'net':>8}")
    for w in range(DAYS // 7):
        ra, rb = a[7 * w + 6], b[7 * w + 6]
        vol = sum(float(r["vol"]) for r in a[7 * w:7 * w + 7])
        press = sum(float(r["press"]) for r in b[7 * w:7 * w + 7])
        print(f"{ra['date']:10} {vol:8.1f} {float(ra['healthy']):8.3f} "
              f"{float(ra['pathological']):8.3f} {float(ra['net']):+8.3f} | "
              f"{press:9.1f} {float(rb['healthy']):8.3f} "
              f"{float(rb['pathological']):8.3f} {float(rb['net']):+8.3f}")
    print("\n(minutes are weekly totals; expression is read on the rest day closing each week;")
    print(" net = healthy - pathological)")


if __name__ == "__main__":
    main()
