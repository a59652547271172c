"""Data-driven model edits: edge fitting, VAM models, fusion and memory sweeps."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gnb import GraphBlock, estimate_vo2max_from_power
from .knowledge import KnowledgePatch, apply_patch
from .metrics import NotComputable, aerobic_decoupling, mean_max_power
from .personicle import Event, StreamSeries

VAM_THRESHOLDS = tuple(range(10))


@dataclass(frozen=True)
class LinearModel:
    slope: float
    intercept: float
    train_rmse: float
    n: int

    def predict(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept

    def to_patch(self, selector: Mapping, provenance: str) -> KnowledgePatch:
        """Knowledge-patch form: replaces the selected edge with ``linear(a, b)``."""
        return KnowledgePatch(dict(selector), transform={
            "kind": "linear", "params": {"a": self.slope, "b": self.intercept}},
            provenance=f"{provenance} (n={self.n}, train_rmse={self.train_rmse:.6g})")


def fit_line(x, y) -> LinearModel:
    """Ordinary least squares ``y = slope * x + intercept``.

    With zero variance in ``x`` the slope is 0 and the intercept is the mean of ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    if x.size < 2:
        raise ValueError(f"need at least 2 samples to fit a line, got {x.size}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    slope = float(dx @ (y - ym)) / sxx if sxx > 0 else 0.0
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    return LinearModel(slope, intercept, float(np.sqrt(np.mean(resid ** 2))), int(x.size))


def rmse(model: LinearModel, x, y) -> float:
    return float(np.sqrt(np.mean((model.predict(x) - np.asarray(y, dtype=float)) ** 2)))


# -- parallel observations ---------------------------------------------------------------

@dataclass
class ParallelFit:
    model: LinearModel | None
    decoupling: dict = field(default_factory=dict)  # event id -> AD percent (None if not computable)
    accepted: list = field(default_factory=list)

    @property
    def updated(self) -> bool:
        return self.model is not None


def fit_parallel_edge(hr: StreamSeries, power: StreamSeries, activities: Iterable[Event],
                      ad_gate_pct: float = 5.0, as_of: int | None = None, window_days: int = 30,
                      min_activities: int = 2) -> ParallelFit:
    """Fit ``power = a * HR + b`` over activities whose |aerobic decoupling| passes the gate.

    Only activities ending within ``window_days`` before ``as_of`` are
    considered. Fewer than ``min_activities`` qualifying activities means
    no update (``model`` is None).
    """
    acts = sorted(activities, key=lambda e: e.start)
    if as_of is not None:
        acts = [a for a in acts if as_of - window_days * 86400 < a.end <= as_of]
    result = ParallelFit(None)
    xs, ys = [], []
    for a in acts:
        h, p = hr.window(a.start, a.end), power.window(a.start, a.end)
        try:
            ad = aerobic_decoupling(p, h)
        except NotComputable:
            result.decoupling[a.event_id] = None
            continue
        result.decoupling[a.event_id] = ad
        if abs(ad) > ad_gate_pct:
            continue
        result.accepted.append(a.event_id)
        t, ih, ip = np.intersect1d(h.t, p.t, assume_unique=True, return_indices=True)
        ok = h.values[ih] > 0
        xs.append(h.values[ih][ok])
        ys.append(p.values[ip][ok])
    if len(result.accepted) >= min_activities:
        result.model = fit_line(np.concatenate(xs), np.concatenate(ys))
    return result


def write_parallel_edge(block: GraphBlock, fit: ParallelFit, selector: Mapping) -> KnowledgePatch | None:
    """Apply a successful fit to the selected HR->power edge; returns the patch applied."""
    if fit.model is None:
        return None
    patch = fit.model.to_patch(selector, "parallel-observation fit")
    apply_patch(block, patch)
    return patch


# -- VAM models ---------------------------------------------------------------------------

@dataclass
class VamModelFamily:
    models: dict  # threshold percent -> LinearModel

    def __bool__(self):
        return bool(self.models)


def fit_vam_family(windows: Sequence[tuple[float, float, float]]) -> VamModelFamily:
    """One VAM -> relative-power model per slope threshold 0..9 %.

    The model for threshold ``s`` is trained on windows whose maximum slope is ``>= s``.
    """
    if not len(windows):
        raise ValueError("no VAM windows to fit")
    arr = np.asarray(windows, dtype=float).reshape(-1, 3)
    models = {}
    for s in VAM_THRESHOLDS:
        sel = arr[arr[:, 2] >= s]
        if len(sel) < 2:
            warnings.warn(f"slope threshold {s}%: only {len(sel)} window(s), model omitted", RuntimeWarning,
                          stacklevel=2)
            continue
        models[s] = fit_line(sel[:, 0], sel[:, 1])
    return VamModelFamily(models)


def select_vam_model(family: VamModelFamily, max_slope_observed_pct: float) -> tuple[int, LinearModel]:
    """Model for ``floor(max slope)`` clamped to 0..9, falling back to the nearest lower fitted threshold."""
    if not family.models:
        raise ValueError("empty VAM model family")
    want = min(max(int(math.floor(max_slope_observed_pct)), VAM_THRESHOLDS[0]), VAM_THRESHOLDS[-1])
    lower = [s for s in family.models if s <= want]
    s = max(lower) if lower else min(family.models)
    return s, family.models[s]


def vam_windows(altitude: StreamSeries, power: StreamSeries, speed: StreamSeries, mass_kg: float,
                width_s: int = 240) -> list[tuple[float, float, float]]:
    """Non-overlapping ``width_s`` windows as (VAM m/h, W/kg, max grade %).

    Grade is altitude change over distance travelled, per 10 s segment.
    """
    t, ia, ip = np.intersect1d(altitude.t, power.t, assume_unique=True, return_indices=True)
    t, j1, isp = np.intersect1d(t, speed.t, assume_unique=True, return_indices=True)
    alt, pw, spd = altitude.values[ia][j1], power.values[ip][j1], speed.values[isp]
    out = []
    for k in range(0, t.size - width_s + 1, width_s):
        sl = slice(k, k + width_s)
        if t[k + width_s - 1] - t[k] != width_s - 1:
            continue  # window spans a gap
        a, s = alt[sl], spd[sl]
        seg_rise = a[10::10] - a[:-10:10]
        seg_dist = np.add.reduceat(s, np.arange(0, width_s, 10))[: seg_rise.size]
        with np.errstate(divide="ignore", invalid="ignore"):
            grade = np.where(seg_dist > 1.0, 100.0 * seg_rise / seg_dist, 0.0)
        rate = (a[-1] - a[0]) * 3600.0 / (width_s - 1)
        out.append((float(rate), float(pw[sl].mean() / mass_kg), float(grade.max(initial=0.0))))
    return out


# -- ground truth and fusion ---------------------------------------------------------------

def daily_best_power(activities: Iterable[StreamSeries], duration_s: int = 240,
                     day_of=lambda t: date.fromtimestamp(0) + timedelta(seconds=int(t))) -> dict[date, float]:
    """Best ``duration_s`` mean power per calendar day (UTC by default)."""
    best: dict[date, float] = {}
    for a in activities:
        if len(a) < duration_s:
            continue
        grid = np.zeros(int(a.t[-1] - a.t[0]) + 1)
        grid[a.t - a.t[0]] = a.values
        p = float(mean_max_power(grid, duration_s)[duration_s - 1])
        d = day_of(a.t[0])
        best[d] = max(best.get(d, 0.0), p)
    return best


def ground_truth_vo2max(daily_best_w: Mapping[date, float], mass_kg: float, horizon_days: int = 42,
                        end: date | None = None) -> list[tuple[date, float]]:
    """Daily VO2max from the trailing mean of each riding day's best 4-minute power.

    Days without riding contribute nothing to the mean; days whose window
    holds no riding day are omitted.
    """
    if not daily_best_w:
        raise ValueError("empty power history")
    days = sorted(daily_best_w)
    end = end or days[-1]
    out, day = [], days[0]
    while day <= end:
        lo = day - timedelta(days=horizon_days - 1)
        vals = [daily_best_w[d] for d in days if lo <= d <= day]
        if vals:
            out.append((day, estimate_vo2max_from_power(sum(vals) / len(vals), mass_kg)))
        day += timedelta(days=1)
    return out


def fuse(estimates: Sequence[tuple[float, float]]) -> tuple[float, list[float]]:
    """Inverse-training-error weighted average of ``(value, train_rmse)`` pairs.

    A component with zero training error takes all the weight (the first
    one, if several); negative errors are rejected.
    """
    if not estimates:
        raise ValueError("nothing to fuse")
    values = [float(v) for v, _ in estimates]
    errs = [float(e) for _, e in estimates]
    if any(not e >= 0 for e in errs):
        raise ValueError(f"training errors must be non-negative, got {errs}")
    if 0.0 in errs:
        k = errs.index(0.0)
        weights = [1.0 if i == k else 0.0 for i in range(len(errs))]
        return values[k], weights
    inv = [1.0 / e for e in errs]
    total = math.fsum(inv)
    weights = [w / total for w in inv]
    value = math.fsum(w * v for w, v in zip(weights, values))
    return min(max(value, min(values)), max(values)), weights


# -- memory sweep ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    horizon: int
    test_rmse: float
    stderr: float
    n_train: int
    n_test: int


def trailing_aggregate(values: np.ndarray, horizon: int, how: str = "sum") -> np.ndarray:
    """Trailing ``horizon``-day sum/mean; NaN until a full window is available."""
    v = np.asarray(values, dtype=float)
    out = np.full(v.size, np.nan)
    if horizon < 1 or v.size < horizon:
        return out
    cs = np.concatenate([[0.0], np.cumsum(v)])
    agg = cs[horizon:] - cs[:-horizon]
    out[horizon - 1:] = agg / horizon if how == "mean" else agg
    return out


def chronological_split(n: int, train_fraction: float = 0.7) -> int:
    return int(math.floor(n * train_fraction))


def memory_sweep(feature: Sequence[float], targets: Sequence[float], horizons: Iterable[int],
                 train_fraction: float = 0.7, aggregate: str = "sum", min_points: int = 5) -> list[SweepRow]:
    """Holdout error of ``target ~ trailing-aggregate(feature, h)`` for each memory ``h``.

    ``feature`` and ``targets`` are aligned daily arrays. Each horizon uses
    the days with a full window, split chronologically into the first
    ``train_fraction`` for fitting and the rest for testing. ``stderr`` is
    the delta-method standard error of the test RMSE.
    """
    f = np.asarray(feature, dtype=float)
    y = np.asarray(targets, dtype=float)
    if f.shape != y.shape:
        raise ValueError("feature and targets must be aligned")
    rows = []
    for h in sorted(set(horizons)):
        x = trailing_aggregate(f, h, aggregate)
        ok = ~np.isnan(x) & ~np.isnan(y)
        xs, ys = x[ok], y[ok]
        cut = chronological_split(xs.size, train_fraction)
        if cut < min_points or xs.size - cut < min_points:
            warnings.warn(f"horizon {h} d: not enough data ({xs.size} days)", RuntimeWarning, stacklevel=2)
            continue
        model = fit_line(xs[:cut], ys[:cut])
        sq = (model.predict(xs[cut:]) - ys[cut:]) ** 2
        mse = float(sq.mean())
        err = math.sqrt(mse)
        se_mse = float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0
        stderr = se_mse / (2 * err) if err > 0 else 0.0
        rows.append(SweepRow(h, err, stderr, cut, int(xs.size - cut)))
    return rows
