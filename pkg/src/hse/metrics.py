"""Training-load, fitness and exposure metrics over 1 Hz streams."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, MutableMapping

import numpy as np

from .personicle import StreamSeries
from .rules import InterfaceEvent, runs

G = 9.81
ROLLING_RESISTANCE = 0.005
CP_MAX_DURATION = 18000

TRIMP_CONSTANTS = {"male": (0.64, 1.92), "female": (0.86, 1.67)}


class ProfileError(ValueError):
    pass


class NotComputable(ValueError):
    """Inputs are missing or too short for the metric."""


@dataclass
class AthleteProfile:
    mass_kg: float
    height_cm: float = 175.0
    sex: str = "male"
    age_years: float = 30.0
    hr_rest: float = 60.0
    hr_max: float | None = None
    genotypes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.hr_max is None:
            self.hr_max = 220.0 - self.age_years
        if self.sex not in TRIMP_CONSTANTS:
            raise ProfileError(f"sex must be 'male' or 'female', got {self.sex!r}")

    def validate(self):
        if self.mass_kg <= 0:
            raise ProfileError(f"mass_kg must be positive, got {self.mass_kg}")
        if self.hr_max <= self.hr_rest:
            raise ProfileError(f"hr_max ({self.hr_max}) must exceed hr_rest ({self.hr_rest})")
        return self

    def hr_reserve_fraction(self, hr):
        return np.clip((np.asarray(hr, dtype=float) - self.hr_rest) / (self.hr_max - self.hr_rest), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "mass_kg": self.mass_kg, "height_cm": self.height_cm, "sex": self.sex,
            "age_years": self.age_years, "hr_rest": self.hr_rest, "hr_max": self.hr_max,
            "genotypes": dict(self.genotypes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AthleteProfile":
        known = {"mass_kg", "height_cm", "sex", "age_years", "hr_rest", "hr_max", "genotypes"}
        extra = set(d) - known
        if extra:
            raise ProfileError(f"unknown profile fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class DailyLoad:
    date: date
    value: float

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"daily load must be non-negative, got {self.value}")


@dataclass
class CpCurve:
    durations: np.ndarray
    watts: np.ndarray

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.watts = np.asarray(self.watts, dtype=float)

    def at(self, duration_s: int) -> float:
        i = np.searchsorted(self.durations, duration_s)
        if i == self.durations.size or self.durations[i] != duration_s:
            raise KeyError(f"duration {duration_s}s not in curve")
        return float(self.watts[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["duration_s", "watts"])
        for d, p in zip(self.durations.tolist(), self.watts.tolist()):
            w.writerow([d, repr(p)])
        return buf.getvalue()


# -- load ---------------------------------------------------------------------

def ctl(loads: Iterable[DailyLoad], as_of: date, horizon_days: int = 42) -> float:
    """Plain trailing mean of daily load over ``horizon_days`` ending at ``as_of``.

    Days without a load record count as zero; several records on one day add.
    """
    if horizon_days < 1:
        raise ValueError("horizon_days must be >= 1")
    first = as_of - timedelta(days=horizon_days - 1)
    return sum(l.value for l in loads if first <= l.date <= as_of) / horizon_days


def ctl_exponential(loads: Iterable[DailyLoad], as_of: date, horizon_days: int = 42) -> float:
    """Exponentially weighted alternative to :func:`ctl` (time constant ``horizon_days``)."""
    by_day: dict[date, float] = {}
    for l in loads:
        if l.date <= as_of:
            by_day[l.date] = by_day.get(l.date, 0.0) + l.value
    if not by_day:
        return 0.0
    k = 1.0 - math.exp(-1.0 / horizon_days)
    day, value = min(by_day), 0.0
    while day <= as_of:
        value += (by_day.get(day, 0.0) - value) * k
        day += timedelta(days=1)
    return value


def trimp(hr: StreamSeries, profile: AthleteProfile) -> float:
    """Exponential heart-rate-reserve TRIMP summed over minute blocks.

    Minute blocks start at the first sample; a partial final block is
    weighted by its length in minutes.
    """
    if profile.hr_max <= profile.hr_rest:
        raise ProfileError(f"hr_max ({profile.hr_max}) must exceed hr_rest ({profile.hr_rest})")
    if not len(hr):
        return 0.0
    k1, k2 = TRIMP_CONSTANTS[profile.sex]
    block = (hr.t - hr.t[0]) // 60
    counts = np.bincount(block)
    sums = np.bincount(block, weights=hr.values)
    used = counts > 0
    hrr = profile.hr_reserve_fraction(sums[used] / counts[used])
    return float(np.sum(hrr * k1 * np.exp(k2 * hrr) * counts[used] / 60.0))


def _window_means(values: np.ndarray, width: int) -> np.ndarray:
    cs = np.concatenate([[0.0], np.cumsum(values, dtype=float)])
    return (cs[width:] - cs[:-width]) / width


def hpa_events(power: StreamSeries, profile: AthleteProfile, threshold_wpkg: float = 10.0,
               window_s: int = 5) -> list[InterfaceEvent]:
    """5 s windows whose mean power per kg exceeds ``threshold_wpkg``.

    Qualifying windows that overlap are merged into one event spanning
    their union. Attributes: ``peak_wpkg`` (best window mean) and ``duration``.
    """
    if profile.mass_kg <= 0:
        raise ProfileError(f"mass_kg must be positive, got {profile.mass_kg}")
    if len(power) < window_s:
        return []
    wpkg = _window_means(power.values, window_s) / profile.mass_kg
    starts = np.flatnonzero(wpkg > threshold_wpkg)
    out = []
    if not starts.size:
        return out
    group = [starts[0]]
    for s in starts[1:].tolist() + [None]:
        if s is not None and s < group[-1] + window_s:
            group.append(s)
            continue
        a, b = group[0], group[-1] + window_s
        peak = float(wpkg[group].max())
        start = int(power.t[a])
        end = int(power.t[b - 1]) + 1
        out.append(InterfaceEvent("HPA", start, end, {"peak_wpkg": peak, "duration": float(end - start)}))
        if s is not None:
            group = [s]
    return out


def graded_power(speed: np.ndarray, slope: np.ndarray, mass_kg: float, dt: float = 1.0,
                 crr: float = ROLLING_RESISTANCE, g: float = G) -> np.ndarray:
    v = np.asarray(speed, dtype=float)
    s = np.asarray(slope, dtype=float)
    a = np.gradient(v, dt) if v.size > 1 else np.zeros_like(v)
    return mass_kg * g * v * s + mass_kg * a * v + crr * mass_kg * g * v


def govss(speed: StreamSeries, slope: StreamSeries, profile: AthleteProfile, cp60_w: float,
          smoothing_s: int = 120, crr: float = ROLLING_RESISTANCE, g: float = G) -> float:
    """Graded-power stress score: ``100 * hours * (mean xGP / cp60)^2``.

    xGP is the trailing ``smoothing_s`` mean of positive graded power
    (the window is truncated at the start of the activity).
    """
    if not cp60_w > 0:
        raise ValueError(f"cp60_w must be positive, got {cp60_w}")
    if len(speed) != len(slope) or not np.array_equal(speed.t, slope.t):
        raise ValueError("speed and slope must be aligned on the same timestamps")
    if not len(speed):
        return 0.0
    p = np.maximum(graded_power(speed.values, slope.values, profile.mass_kg, crr=crr, g=g), 0.0)
    cs = np.concatenate([[0.0], np.cumsum(p)])
    idx = np.arange(1, p.size + 1)
    lo = np.maximum(idx - smoothing_s, 0)
    xgp = (cs[idx] - cs[lo]) / (idx - lo)
    hours = p.size / 3600.0
    return float(100.0 * hours * (xgp.mean() / cp60_w) ** 2)


def vam(altitude: StreamSeries, window: tuple[int, int]) -> float:
    """Vertical ascent rate in m/h between the first and last sample in ``window``."""
    seg = altitude.window(*window)
    if len(seg) < 2:
        raise NotComputable(f"VAM needs at least 2 altitude samples in {window}, got {len(seg)}")
    return float((seg.values[-1] - seg.values[0]) * 3600.0 / (seg.t[-1] - seg.t[0]))


def active_time(cadence: StreamSeries, threshold_rpm: float = 10.0) -> int:
    return int(np.count_nonzero(cadence.values > threshold_rpm))


def _align(a: StreamSeries, b: StreamSeries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t, ia, ib = np.intersect1d(a.t, b.t, assume_unique=True, return_indices=True)
    return t, a.values[ia], b.values[ib]


def aerobic_decoupling(power: StreamSeries | None, hr: StreamSeries | None, min_samples: int = 60) -> float:
    """Percent drop of the power:HR ratio from the first to the second half.

    The aligned samples are split at the midpoint index; within each half,
    seconds with ``hr <= 0`` (strap dropouts) are ignored.
    """
    if power is None or hr is None or not len(power) or not len(hr):
        raise NotComputable("aerobic decoupling needs both power and heart rate")
    _, p, h = _align(power, hr)
    mid = p.size // 2
    ratios = []
    for ps, hs in ((p[:mid], h[:mid]), (p[mid:], h[mid:])):
        ok = hs > 0
        if np.count_nonzero(ok) < min_samples:
            raise NotComputable(f"each half needs >= {min_samples} samples with hr > 0")
        ratios.append(ps[ok].mean() / hs[ok].mean())
    first, last = ratios
    if first == 0:
        raise NotComputable("first-half power:HR ratio is zero; decoupling undefined")
    return float((first - last) * 100.0 / first)


def mean_max_power(values: np.ndarray, max_duration: int | None = None) -> np.ndarray:
    """Best mean power for every window length 1..n (index 0 is duration 1)."""
    v = np.asarray(values, dtype=float)
    n = v.size if max_duration is None else min(v.size, max_duration)
    cs = np.concatenate([[0.0], np.cumsum(v)])
    out = np.empty(n)
    for d in range(1, n + 1):
        out[d - 1] = (cs[d:] - cs[:-d]).max() / d
    return out


def _one_hz(series: StreamSeries) -> np.ndarray:
    """Power on a gap-free 1 Hz grid; missing seconds count as 0 W."""
    if not len(series):
        return np.zeros(0)
    out = np.zeros(int(series.t[-1] - series.t[0]) + 1)
    out[series.t - series.t[0]] = series.values
    return out


def cp_curve(activities: Iterable[StreamSeries], durations: Iterable[int] | None = None,
             lookback_days: int = 42, as_of: int | None = None,
             cache: MutableMapping | None = None) -> CpCurve:
    """Critical-power curve across activities.

    For each duration ``d`` this is the best mean power over any window of
    at least ``d`` seconds in any activity ending within ``lookback_days``
    of ``as_of`` (a longer effort at a given power implies the shorter one).
    Durations longer than every activity get 0 W.

    Windows up to ``2 * max(durations) - 1`` seconds are scanned: any longer
    window splits into pieces of at least that many seconds, one of which
    has a mean no lower than the whole. ``cache`` (any mutable mapping) keeps
    per-activity mean-max curves between calls.
    """
    durations = np.arange(1, CP_MAX_DURATION + 1) if durations is None else np.asarray(sorted(set(durations)))
    if durations.size and (durations[0] < 1 or durations[-1] > CP_MAX_DURATION):
        raise ValueError(f"durations must lie within [1, {CP_MAX_DURATION}]")
    if not durations.size:
        return CpCurve(durations, np.zeros(0))
    activities = [a for a in activities if len(a)]
    if as_of is not None:
        lo = as_of - lookback_days * 86400
        activities = [a for a in activities if lo < a.t[-1] <= as_of]
    limit = 2 * int(durations[-1]) - 1
    best = np.zeros(limit)
    for a in activities:
        mmp = _activity_mean_max(a, limit, cache)
        best[: mmp.size] = np.maximum(best[: mmp.size], mmp)
    envelope = np.maximum.accumulate(best[::-1])[::-1]
    return CpCurve(durations, envelope[durations - 1])


def _activity_mean_max(series: StreamSeries, limit: int, cache: MutableMapping | None) -> np.ndarray:
    if cache is None:
        return mean_max_power(_one_hz(series), limit)
    digest = hashlib.blake2b(series.t.tobytes() + series.values.tobytes(), digest_size=16).digest()
    key = (int(series.t[0]), int(series.t[-1]), len(series), digest)
    hit = cache.get(key)
    if hit is None or (hit.size < limit and hit.size < series.t[-1] - series.t[0] + 1):
        hit = cache[key] = mean_max_power(_one_hz(series), limit)
    return hit[:limit]


def log_grid(max_duration: int = CP_MAX_DURATION, points: int = 60) -> np.ndarray:
    return np.unique(np.round(np.geomspace(1, max_duration, points)).astype(np.int64))


# -- exposure -------------------------------------------------------------------

def minute_means(series: StreamSeries) -> StreamSeries:
    """Average onto whole-minute timestamps (``t - t % 60``)."""
    if not len(series):
        return StreamSeries(series.stream_id, series.unit, source=series.source)
    minute = series.t - series.t % 60
    keys, inv = np.unique(minute, return_inverse=True)
    means = np.bincount(inv, weights=series.values) / np.bincount(inv)
    return StreamSeries(series.stream_id, series.unit, keys, means, series.source)


@dataclass
class Exposure:
    t: np.ndarray
    breathing_rate: np.ndarray
    tidal_volume_l: np.ndarray
    intake_ug: np.ndarray
    total_ug: float
    events: list[InterfaceEvent]


def pollutant_intake(hr: StreamSeries, concentration: StreamSeries, profile: AthleteProfile,
                     threshold_ug: float = 0.7, rule_name: str = "HighPM25Intake") -> Exposure:
    """Per-minute inhaled mass from heart rate and ambient concentration.

    Inputs are per-minute series; only minutes present in both are used.
    Consecutive minutes above ``threshold_ug`` form one event.
    """
    t, h, c = _align(hr, concentration)
    if np.any(c < 0):
        raise ValueError("negative pollutant concentration")
    br = np.clip(12.0 + 0.32 * (h - profile.hr_rest), 12.0, 60.0)
    vt = 0.007 * profile.mass_kg * (1.0 + 2.0 * profile.hr_reserve_fraction(h))
    intake = br * vt * 0.001 * c
    events = []
    for i, j in runs(intake > threshold_ug):
        seg = intake[i:j]
        start, end = int(t[i]), int(t[j - 1]) + 60
        events.append(InterfaceEvent(rule_name, start, end, {
            "duration": float(end - start), "peak_intake_ug": float(seg.max()),
            "total_intake_ug": float(seg.sum())}))
    return Exposure(t, br, vt, intake, float(intake.sum()), events)


def spo2_events(spo2: StreamSeries, threshold: float = 95.0) -> list[InterfaceEvent]:
    """Maximal runs of consecutive samples strictly below ``threshold``.

    An event runs from its first to its last low sample.
    """
    v = spo2.values
    if np.any((v < 0) | (v > 100)):
        raise ValueError("SpO2 values must lie within [0, 100]")
    out = []
    for i, j in runs(v < threshold):
        start, end = int(spo2.t[i]), int(spo2.t[j - 1])
        out.append(InterfaceEvent("LowSpO2", start, end, {
            "duration": float(end - start), "min": float(v[i:j].min()), "samples": float(j - i)}))
    return out


# -- composite scores --------------------------------------------------------------

def _check_range(name, x, lo, hi):
    if not (lo <= x <= hi):
        raise ValueError(f"{name} must lie within [{lo}, {hi}], got {x}")


def _hrv_norm(hrv_ms: float) -> float:
    return min(max(hrv_ms / 100.0, 0.0), 1.0)


def sleep_score(duration_h: float, movement_index: float, hrv_ms: float, subjective_0_10: float) -> float:
    _check_range("duration_h", duration_h, 0, 24)
    _check_range("movement_index", movement_index, 0, 1)
    _check_range("subjective_0_10", subjective_0_10, 0, 10)
    if hrv_ms < 0:
        raise ValueError(f"hrv_ms must be non-negative, got {hrv_ms}")
    return 100.0 * (0.4 * min(duration_h / 8.0, 1.0) + 0.2 * (1.0 - movement_index)
                    + 0.2 * _hrv_norm(hrv_ms) + 0.2 * subjective_0_10 / 10.0)


def stress_score(hrv_ms: float, subjective_0_10: float) -> float:
    _check_range("subjective_0_10", subjective_0_10, 0, 10)
    if hrv_ms < 0:
        raise ValueError(f"hrv_ms must be non-negative, got {hrv_ms}")
    return 100.0 * (0.5 * (1.0 - _hrv_norm(hrv_ms)) + 0.5 * subjective_0_10 / 10.0)


def metrics_csv(rows: Iterable[tuple[date, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "metric", "value"])
    for d, name, value in rows:
        w.writerow([d.isoformat(), name, repr(float(value))])
    return buf.getvalue()
