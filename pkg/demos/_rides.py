"""Synthetic ride generator and a CLI runner shared by the demo scripts."""

from __future__ import annotations

import contextlib
import csv
import io
from pathlib import Path

import numpy as np

from hse.cli import main

DAY0 = 1714521600  # 2024-05-01T00:00:00Z


def hse(*argv) -> str:
    """Run the ``hse`` CLI in-process and return its standard output."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"hse {' '.join(map(str, argv))} exited with {code}")
    return buf.getvalue()


def table(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def hill_ride(rng: np.random.Generator, ftp: float, mass_kg: float, grade_pct: float,
              hr_rest: float = 48.0, hr_gain: float = 0.42) -> dict[str, np.ndarray]:
    """Two laps of a 45-minute loop: 15 min flat, 20 min climb, 10 min descent.

    Heart rate follows power through a first-order lag so the HR->power
    relation is linear in steady state.
    """
    segments = [(900, 0.60, 0.0), (1200, 0.88, grade_pct), (600, 0.15, -grade_pct)] * 2
    power, grade = [], []
    for n, frac, g in segments:
        power.append(np.clip(ftp * frac + rng.normal(0, 0.05 * ftp, n), 0, None))
        grade.append(np.full(n, g))
    p = np.concatenate(power).round(0)
    g = np.concatenate(grade) / 100.0
    total_mass = mass_kg + 9.0
    # steady-state speed: climbing and rolling resistance plus a linear drag term
    speed = np.where(g > 0, p / (9.81 * total_mass * (g + 0.005) + 12.0), 0.0)
    speed = np.where(g < 0, 14.0, speed)
    speed = np.where(g == 0, p / (9.81 * total_mass * 0.005 + 25.0) + 3.0, speed)
    altitude = 200.0 + np.cumsum(speed * g)
    target = hr_rest + hr_gain * p
    hr = np.empty_like(target)
    hr[0] = hr_rest + 30
    for i in range(1, target.size):
        hr[i] = hr[i - 1] + (target[i] - hr[i - 1]) / 30.0
    return {"hr": hr.round(1), "power": p, "speed": speed.round(2), "altitude": altitude.round(2)}


def write_ride(path: Path, columns: dict[str, np.ndarray], t0: int) -> Path:
    n = len(next(iter(columns.values())))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *columns])
        for i in range(n):
            w.writerow([t0 + i, *(repr(float(c[i])) for c in columns.values())])
    return path
