"""Eight weeks of hill training, followed through the ``hse`` command line.

A rider (61 kg, resting HR 48) trains four days a week with a threshold
that grows by about 1.5 W a week, so critical power at 1000 s crosses the
2.5 W/kg race-ready line late in the block. The script initialises a store
for the ``cycling`` intent, ingests every ride, and runs the daily update. It then
prints a weekly view of chronic load, critical power at 1000 s, distance to
the race-ready region, and the cardiac state, and finishes by learning the
HR->power edge and fusing VO2max estimates.

Run:  python3 demos/season.py
"""

import json
import tempfile
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from _rides import DAY0, hill_ride, hse, table, write_ride

WEEKS = 8
MASS = 61.0


def main() -> None:
    rng = np.random.default_rng(11)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        store = tmp / "store"
        profile = tmp / "profile.json"
        profile.write_text(json.dumps({"mass_kg": MASS, "age_years": 34, "hr_rest": 48,
                                       "genotypes": {"rs1815739": "2C"}}))
        print(hse("--store", store, "init", "--intent", "cycling", "--profile", profile))

        rides = []
        for day in range(WEEKS * 7):
            if day % 7 in (1, 3, 5, 6):
                ftp = 163.0 + 1.5 * day / 7
                cols = hill_ride(rng, ftp, MASS, grade_pct=float(rng.uniform(3, 9)))
                rides.append(write_ride(tmp / f"ride{day:02d}.csv", cols, DAY0 + day * 86400 + 7 * 3600))
        ingested = table(hse("--store", store, "ingest", *rides))
        print(f"ingested {len(ingested)} rides, {sum(int(r['rows']) for r in ingested)} samples\n")

        last = date(2024, 5, 1) + timedelta(days=WEEKS * 7 - 1)
        daily = table(hse("--store", store, "update", "--from", "2024-05-01", "--to", last.isoformat()))
        print(f"{'week':>4} {'CTL':>6} {'CP1000 W':>9} {'W/kg':>5} {'readiness':>10} {'distance':>8} "
              f"{'SV mL':>6} {'heart net':>9}")
        for week in range(WEEKS):
            row = daily[week * 7 + 6]
            ready = table(hse("--store", store, "query", "readiness", "--roi", "race_ready", "--day", row["date"]))[0]
            print(f"{week + 1:>4} {float(row['ctl']):6.1f} {float(row['cp_1000_w']):9.1f} "
                  f"{float(row['cp_1000_wpkg']):5.2f} {ready['status']:>10} {float(ready['distance']):8.3f} "
                  f"{float(row['stroke_volume_ml']):6.1f} {float(row['gene_net']):9.3f}")

        print("\nHR->power edge learned from rides that pass the aerobic-decoupling gate:")
        out = hse("--store", store, "learn", "edges", "--as-of", last.isoformat(), "--dry-run")
        accepted = [r for r in table(out.split("\n\n")[0]) if r["accepted"] == "True"]
        patch = json.loads(out.split("\n\n")[1])
        print(f"  {len(accepted)} rides accepted; power = {patch['transform']['params']['a']:.3f} * HR "
              f"{patch['transform']['params']['b']:+.1f}")

        print("\nVO2max fusion (weights are inverse training RMSE):")
        print(hse("--store", store, "learn", "fusion", "--as-of", last.isoformat(), "--dry-run"))


if __name__ == "__main__":
    main()
