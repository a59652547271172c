"""Inhaled PM2.5 on a commute past a busy junction.

A rider crosses town in 40 minutes. Each GPS fix is joined to the nearest
air-quality station reading (haversine distance, nearest in time on ties).
Three stations are involved: a park, a roadside station at a junction
halfway along, and a hilltop. Per-minute intake is breathing rate ×
tidal volume × concentration. Both ventilation terms rise with heart rate, so the same air
costs more on the climb. Minutes above 0.7 µg form interface events.

Run:  python3 demos/exposome.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from _rides import DAY0, hse, table, write_ride

MINUTES = 40


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        store = tmp / "store"
        profile = tmp / "profile.json"
        profile.write_text(json.dumps({"mass_kg": 70, "age_years": 40, "hr_rest": 55}))
        hse("--store", store, "init", "--intent", "cycling", "--profile", profile)

        n = MINUTES * 60
        k = np.arange(n)
        climb = (k >= 1200) & (k < 1800)
        ride = write_ride(tmp / "commute.csv", {"hr": np.where(climb, 165.0, 120.0),
                                                "power": np.where(climb, 260.0, 150.0)}, DAY0 + 7 * 3600)
        lat = np.linspace(47.60, 47.66, MINUTES)
        locs = tmp / "locations.csv"
        locs.write_text("t,lat,lon\n" + "".join(f"{DAY0 + 7 * 3600 + 60 * i},{la:.5f},-122.33\n"
                                                 for i, la in enumerate(lat)))
        sensors = tmp / "sensors.csv"
        rows = []
        for hour_min in range(0, 60, 10):
            t = DAY0 + 7 * 3600 + hour_min * 60
            rows.append(f"{t},47.600,-122.33,PM2.5,6.0,ug/m3\n")   # park
            rows.append(f"{t},47.630,-122.33,PM2.5,{40.0 + hour_min / 2},ug/m3\n")  # junction, rush hour building
            rows.append(f"{t},47.660,-122.33,PM2.5,9.0,ug/m3\n")   # hilltop
        sensors.write_text("t,lat,lon,pollutant,value,unit\n" + "".join(rows))
        hse("--store", store, "ingest", ride, "--locations", locs, "--sensors", sensors)

        out = hse("--store", store, "query", "exposure", "--activity", "commute")
    minutes, totals = out.split("\n\n")
    print(f"{'min':>3} {'HR':>5} {'PM2.5':>6} {'band':>19} {'L/min':>6} {'µg':>6}  event")
    for i, r in enumerate(table(minutes)):
        vent = float(r["breathing_rate_min"]) * float(r["tidal_volume_l"])
        print(f"{i:>3} {float(r['hr_bpm']):5.0f} {float(r['concentration']):6.1f} {r['epa_band']:>19} "
              f"{vent:6.1f} {float(r['intake_ug']):6.3f}  {r['event']}")
    t = table(totals)[0]
    print(f"\ntotal {float(t['total_ug']):.2f} µg over {t['minutes']} min; {t['events']} high-intake event(s)")


if __name__ == "__main__":
    main()
