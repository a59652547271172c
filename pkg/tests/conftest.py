"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import contextlib
import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hse.metrics import AthleteProfile
from hse.personicle import StreamSeries

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=1000, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DAY0 = 1714521600  # 2024-05-01T00:00:00Z


def series(values, t0: int = 0, stream_id: str = "x", unit: str = "u") -> StreamSeries:
    v = np.asarray(values, dtype=float)
    return StreamSeries(stream_id, unit, t0 + np.arange(v.size), v)


def write_activity(path: Path, columns: dict, t0: int) -> Path:
    """Write an activity CSV at 1 Hz from equal-length column arrays."""
    n = len(next(iter(columns.values())))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *columns])
        for i in range(n):
            w.writerow([t0 + i, *(repr(float(columns[c][i])) for c in columns)])
    return path


def synthetic_ride(rng: np.random.Generator, n: int = 3600, drift: float = 0.0) -> dict:
    """HR/power/speed/altitude columns of a plausible steady ride.

    ``drift`` adds a linear heart-rate rise over the ride (cardiac drift),
    which raises aerobic decoupling.
    """
    k = np.arange(n)
    hr = 125 + 15 * np.sin(k / 500) + drift * k / n + rng.normal(0, 1.5, n)
    power = 2.0 * (hr - drift * k / n) - 90 + rng.normal(0, 4, n)
    grade = np.where((k // 600) % 2 == 0, 0.05, -0.02)
    speed = np.full(n, 6.0) + rng.normal(0, 0.2, n)
    altitude = 200 + np.cumsum(speed * grade)
    return {"hr": hr.round(1), "power": power.round(1), "speed": speed.round(2), "altitude": altitude.round(2)}


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def profile():
    return AthleteProfile(mass_kg=58.0, age_years=30.0, hr_rest=48.0, genotypes={"rs1815739": "1C 1T"})


@pytest.fixture
def profile_file(tmp_path):
    path = tmp_path / "profile.json"
    path.write_text(json.dumps({"mass_kg": 58.0, "age_years": 30.0, "hr_rest": 48.0,
                                "genotypes": {"rs1815739": "1C 1T"}}))
    return path


# -- CLI helpers -------------------------------------------------------------------

def hse(capsys, *argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    from hse.cli import main

    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_profile(path: Path, **fields) -> Path:
    doc = {"mass_kg": 58.0, "age_years": 30.0, "hr_rest": 48.0, "genotypes": {"rs1815739": "1C 1T"}}
    doc.update(fields)
    path.write_text(json.dumps(doc))
    return path


def constant_ride(path: Path, t0: int, watts: float, n: int = 1200, hr: float = 130.0) -> Path:
    return write_activity(path, {"hr": np.full(n, hr), "power": np.full(n, watts)}, t0)


def month_of_rides(folder: Path, days: int = 30, seed: int = 1) -> list[Path]:
    """A ride every other day, 08:00 UTC, with climbs and sprints so every rule can fire."""
    r = np.random.default_rng(seed)
    out = []
    for d in range(0, days, 2):
        cols = synthetic_ride(r, n=2400)
        k = np.arange(2400)
        sprint = (k % 600) < 8
        cols["power"] = np.where(sprint, 720.0, cols["power"])
        cols["hr"] = np.where((k % 600 >= 8) & (k % 600 < 20), cols["hr"] + 20, cols["hr"]).round(1)
        out.append(write_activity(folder / f"ride{d:02d}.csv", cols, DAY0 + d * 86400 + 8 * 3600))
    return out


# -- acceptance reporting -------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's pass/fail outcome."""
    results = request.config.stash[_ACCEPTANCE]

    @contextlib.contextmanager
    def check(label: str):
        try:
            yield
        except BaseException:
            results.append((label, False))
            raise
        results.append((label, True))

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in sorted(results, key=lambda r: int(r[0].split(".")[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
