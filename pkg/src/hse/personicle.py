"""Personicle: the person's interval events and timestamped data streams.

Timestamps are integer UTC seconds throughout. Streams are held as numpy
arrays (``t`` int64, ``values`` float64); :attr:`StreamSeries.samples`
materialises :class:`Sample` records when a per-sample view is wanted.

On-disk layout of a :class:`Store` root::

    events.jsonl            one JSON event per line, append-only
    streams/<id>.csv        ``t,value`` lines, append-only
    streams/<id>.json       unit/source metadata
    locations/<src>.csv     ``t,lat,lon,alt`` lines, append-only
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088

# Recognised activity CSV columns and their units.
ACTIVITY_COLUMNS = {
    "hr": "bpm",
    "power": "W",
    "cadence": "rpm",
    "speed": "m/s",
    "altitude": "m",
    "temp": "C",
}


class PersonicleError(Exception):
    """Base class for store and ingestion failures."""


class HeaderError(PersonicleError):
    pass


class NoDataError(PersonicleError):
    pass


class StreamNotFound(PersonicleError, KeyError):
    def __str__(self):
        return f"unknown stream: {self.args[0]}"


@dataclass(frozen=True)
class Sample:
    t: int
    value: float
    unit: str
    source: str = ""

    def __post_init__(self):
        if not self.unit:
            raise ValueError("sample unit must be nonempty")
        if not math.isfinite(self.value):
            raise ValueError(f"sample value must be finite, got {self.value}")


@dataclass(frozen=True)
class LocationSample:
    t: int
    lat: float
    lon: float
    alt: float = 0.0
    source: str = ""

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


class StreamSeries:
    """A time-ordered, single-unit value stream."""

    def __init__(self, stream_id: str, unit: str, t=(), values=(), source: str = ""):
        self.stream_id = stream_id
        self.unit = unit
        self.source = source
        self.t = np.asarray(t, dtype=np.int64).reshape(-1)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.t.shape != self.values.shape:
            raise ValueError("t and values must have the same length")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError(f"stream {stream_id!r}: timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, stream_id: str, samples: Sequence[Sample]) -> "StreamSeries":
        units = {s.unit for s in samples}
        if len(units) > 1:
            raise ValueError(f"mixed units in stream {stream_id!r}: {sorted(units)}")
        unit = units.pop() if units else ""
        source = samples[0].source if samples else ""
        return cls(stream_id, unit, [s.t for s in samples], [s.value for s in samples], source)

    @property
    def samples(self) -> list[Sample]:
        return [Sample(int(t), float(v), self.unit, self.source) for t, v in zip(self.t, self.values)]

    def __len__(self):
        return int(self.t.size)

    def __repr__(self):
        span = f"{self.t[0]}..{self.t[-1]}" if len(self) else "empty"
        return f"StreamSeries({self.stream_id!r}, unit={self.unit!r}, n={len(self)}, {span})"

    def __eq__(self, other):
        if not isinstance(other, StreamSeries):
            return NotImplemented
        return (
            self.stream_id == other.stream_id
            and self.unit == other.unit
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.values, other.values)
        )

    def window(self, t0: int, t1: int) -> "StreamSeries":
        lo, hi = np.searchsorted(self.t, [t0, t1 + 1], side="left")
        return StreamSeries(self.stream_id, self.unit, self.t[lo:hi], self.values[lo:hi], self.source)

    def renamed(self, stream_id: str) -> "StreamSeries":
        return StreamSeries(stream_id, self.unit, self.t, self.values, self.source)


@dataclass
class Event:
    event_type: str
    event_name: str
    start: int
    end: int
    parameters: dict = field(default_factory=dict)
    stream_refs: frozenset = frozenset()

    def __post_init__(self):
        if not self.event_type:
            raise ValueError("event_type must be nonempty")
        if self.end < self.start:
            raise ValueError(f"event end {self.end} precedes start {self.start}")
        for k, v in self.parameters.items():
            if not isinstance(v, (int, float, str)) or isinstance(v, bool):
                raise TypeError(f"parameter {k!r} must be number or text, got {type(v).__name__}")
        self.stream_refs = frozenset(self.stream_refs)

    @property
    def event_id(self) -> str:
        return f"{self.event_type}:{self.event_name}:{self.start}"

    @property
    def duration(self) -> int:
        return self.end - self.start

    def covers(self, t) -> np.ndarray | bool:
        return (self.start <= t) & (t <= self.end)

    def to_dict(self) -> dict:
        return {
            "event_type": self.event_type,
            "event_name": self.event_name,
            "start": self.start,
            "end": self.end,
            "parameters": self.parameters,
            "stream_refs": sorted(self.stream_refs),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Event":
        return cls(d["event_type"], d["event_name"], int(d["start"]), int(d["end"]),
                   dict(d.get("parameters", {})), frozenset(d.get("stream_refs", ())))


def parse_timestamp(text: str) -> int:
    """Integer UTC seconds, or an RFC 3339 timestamp (naive means UTC)."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        f = float(text)
    except ValueError:
        f = None
    if f is not None:
        if not math.isfinite(f) or f != int(f):
            raise ValueError(f"sub-second or non-finite timestamp: {text!r}")
        return int(f)
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_value(text: str) -> float | None:
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


@dataclass
class IngestResult:
    event: Event
    streams: dict[str, StreamSeries]
    skipped: dict[str, int]
    rows: int

    def __iter__(self):
        # allows ``event, streams = ingest_activity_csv(...)``
        return iter((self.event, self.streams))


def ingest_activity_csv(path, event_name: str | None = None, source: str | None = None) -> IngestResult:
    """Read an activity CSV into one ``activity`` event plus one series per column.

    Blank cells are treated as absent. Cells that do not parse as a finite
    number are skipped and counted per column in ``skipped``. Rows whose
    timestamp cannot be parsed are counted under ``skipped["t"]``.
    """
    path = Path(path)
    source = source or path.name
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise HeaderError(f"{path}: missing header row") from None
        if "t" not in header:
            raise HeaderError(f"{path}: header {header} lacks required column 't'")
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise HeaderError(f"{path}: duplicate header columns {dupes}")
        unknown = [h for h in header if h != "t" and h not in ACTIVITY_COLUMNS]
        if unknown:
            raise HeaderError(f"{path}: unrecognised columns {unknown}; expected subset of "
                              f"t,{','.join(ACTIVITY_COLUMNS)}")
        cols = {h: i for i, h in enumerate(header)}
        data: dict[str, list[tuple[int, float]]] = {h: [] for h in header if h != "t"}
        skipped = {h: 0 for h in header}
        times: list[int] = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            try:
                t = parse_timestamp(row[cols["t"]])
            except (ValueError, IndexError):
                skipped["t"] += 1
                continue
            times.append(t)
            for name in data:
                i = cols[name]
                cell = row[i].strip() if i < len(row) else ""
                if not cell:
                    continue
                v = _parse_value(cell)
                if v is None:
                    skipped[name] += 1
                else:
                    data[name].append((t, v))
    if not times:
        raise NoDataError(f"{path}: no valid rows")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NoDataError(f"{path}: timestamps are not strictly increasing")
    streams = {}
    for name, pts in data.items():
        if pts:
            t, v = zip(*pts)
            streams[name] = StreamSeries(name, ACTIVITY_COLUMNS[name], t, v, source)
    event = Event(
        "activity",
        event_name or path.stem,
        times[0],
        times[-1],
        {"rows": len(times), "source": source},
        frozenset(streams),
    )
    return IngestResult(event, streams, {k: v for k, v in skipped.items() if v}, len(times))


def export_activity_csv(path, streams: Mapping[str, StreamSeries]) -> None:
    """Write streams back to the activity CSV contract (outer join on ``t``)."""
    names = [c for c in ACTIVITY_COLUMNS if c in streams]
    all_t = sorted(set().union(*(s.t.tolist() for s in streams.values()))) if streams else []
    lookup = {n: dict(zip(streams[n].t.tolist(), streams[n].values.tolist())) for n in names}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for t in all_t:
            w.writerow([t, *(repr(lookup[n][t]) if t in lookup[n] else "" for n in names)])


def resample_hold(series: StreamSeries, t0: int, t1: int, step: int = 1) -> StreamSeries:
    """Hold-forward resample onto ``t0, t0+step, ..., <= t1``.

    Grid points before the first sample are dropped; values are never
    interpolated. Samples earlier than ``t0`` seed the held value.
    """
    if step <= 0:
        raise ValueError("resample step must be positive")
    grid = np.arange(t0, t1 + 1, step, dtype=np.int64)
    if not len(series) or not grid.size:
        return StreamSeries(series.stream_id, series.unit, source=series.source)
    idx = np.searchsorted(series.t, grid, side="right") - 1
    keep = idx >= 0
    return StreamSeries(series.stream_id, series.unit, grid[keep], series.values[idx[keep]], series.source)


def hold_on_grid(series: StreamSeries, grid: np.ndarray) -> np.ndarray:
    """Values of ``series`` held forward onto ``grid``; NaN before the first sample."""
    out = np.full(grid.shape, np.nan)
    if len(series):
        idx = np.searchsorted(series.t, grid, side="right") - 1
        ok = idx >= 0
        out[ok] = series.values[idx[ok]]
    return out


def query_events(events: Iterable[Event], event_type: str | None, window: tuple[int, int]) -> list[Event]:
    t0, t1 = window
    if t0 > t1:
        raise ValueError(f"window start {t0} after end {t1}")
    hits = [e for e in events
            if e.start <= t1 and e.end >= t0 and (event_type is None or e.event_type == event_type)]
    return sorted(hits, key=lambda e: (e.start, e.end, e.event_type, e.event_name))


# -- geospatial enrichment --------------------------------------------------

def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass
class SensorTable:
    """Public sensor readings: one row per (sensor position, time, pollutant)."""

    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    pollutant: np.ndarray
    value: np.ndarray
    unit: np.ndarray

    @classmethod
    def from_rows(cls, rows: Iterable[Mapping]) -> "SensorTable":
        rows = list(rows)
        return cls(
            np.array([parse_timestamp(str(r["t"])) for r in rows], dtype=np.int64),
            np.array([float(r["lat"]) for r in rows]),
            np.array([float(r["lon"]) for r in rows]),
            np.array([str(r["pollutant"]) for r in rows], dtype=object),
            np.array([float(r["value"]) for r in rows]),
            np.array([str(r.get("unit", "") or "") for r in rows], dtype=object),
        )

    @classmethod
    def read_csv(cls, path) -> "SensorTable":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            need = {"t", "lat", "lon", "pollutant", "value", "unit"}
            missing = need - set(reader.fieldnames or ())
            if missing:
                raise HeaderError(f"{path}: sensor table missing columns {sorted(missing)}")
            return cls.from_rows(reader)

    def __len__(self):
        return int(self.t.size)


@dataclass
class GeoContext:
    streams: dict[str, StreamSeries]
    gaps: dict[str, int]


def attach_geo_context(
    locations: Sequence[LocationSample],
    sensors: SensorTable,
    max_km: float = 50.0,
    max_dt_s: int = 1800,
) -> GeoContext:
    """Nearest-sensor join of a location track against public sensor readings.

    For each location and pollutant the chosen reading minimises
    (distance, |time offset|, reading time) among readings within
    ``max_dt_s`` seconds and ``max_km`` kilometres. Locations without a
    candidate are omitted and counted in ``gaps``.
    """
    streams, gaps = {}, {}
    for pol in sorted(set(sensors.pollutant.tolist())):
        m = sensors.pollutant == pol
        st, slat, slon, sval = sensors.t[m], sensors.lat[m], sensors.lon[m], sensors.value[m]
        units = {u for u in sensors.unit[m].tolist() if u}
        unit = units.pop() if len(units) == 1 else ("mixed" if units else "unknown")
        ts, vs, missed = [], [], 0
        for loc in locations:
            dt = np.abs(st - loc.t)
            d = haversine_km(loc.lat, loc.lon, slat, slon)
            ok = (dt <= max_dt_s) & (d <= max_km)
            if not ok.any():
                missed += 1
                continue
            cand = np.flatnonzero(ok)
            best = cand[np.lexsort((st[cand], dt[cand], d[cand]))[0]]
            if ts and loc.t <= ts[-1]:
                continue  # duplicate location timestamp; first fix wins
            ts.append(loc.t)
            vs.append(sval[best])
        streams[pol] = StreamSeries(pol, unit, ts, vs, "geo")
        gaps[pol] = missed
    return GeoContext(streams, gaps)


# -- persistent store ---------------------------------------------------------

def _safe_id(stream_id: str) -> str:
    if not stream_id or any(c in stream_id for c in "/\\\0") or stream_id.startswith("."):
        raise ValueError(f"invalid stream id {stream_id!r}")
    return stream_id


class Store:
    """Append-only, directory-backed personicle.

    Reads load whole files into memory, so each query works on a snapshot
    of what was on disk when it started. Writers are expected to be
    serialised by the caller (the CLI holds a lock file).
    """

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "streams").mkdir(parents=True, exist_ok=True)
        (self.root / "locations").mkdir(exist_ok=True)
        self._events_path = self.root / "events.jsonl"

    # events
    def add_event(self, event: Event) -> bool:
        """Append ``event``; returns False if an event with the same identity exists."""
        if any(e.event_id == event.event_id for e in self.events()):
            return False
        with self._events_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
        return True

    def events(self) -> list[Event]:
        if not self._events_path.exists():
            return []
        with self._events_path.open(encoding="utf-8") as fh:
            return [Event.from_dict(json.loads(line)) for line in fh if line.strip()]

    def query_events(self, event_type: str | None = None, window=(-(2**62), 2**62)) -> list[Event]:
        return query_events(self.events(), event_type, window)

    # streams
    def stream_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "streams").glob("*.json"))

    def append(self, series: StreamSeries) -> int:
        sid = _safe_id(series.stream_id)
        meta_path = self.root / "streams" / f"{sid}.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta["unit"] != series.unit:
                raise PersonicleError(f"stream {sid!r} has unit {meta['unit']!r}, got {series.unit!r}")
        else:
            meta_path.write_text(json.dumps({"stream_id": sid, "unit": series.unit,
                                             "source": series.source}, sort_keys=True))
        with (self.root / "streams" / f"{sid}.csv").open("a", encoding="utf-8") as fh:
            fh.writelines(f"{t},{v!r}\n" for t, v in zip(series.t.tolist(), series.values.tolist()))
        return len(series)

    def load_stream(self, stream_id: str) -> StreamSeries:
        meta_path = self.root / "streams" / f"{_safe_id(stream_id)}.json"
        if not meta_path.exists():
            raise StreamNotFound(stream_id)
        meta = json.loads(meta_path.read_text())
        data_path = meta_path.with_suffix(".csv")
        pts: dict[int, float] = {}
        if data_path.exists():
            with data_path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        t, v = line.split(",", 1)
                        pts[int(t)] = float(v)  # later appends win on duplicate t
        ts = sorted(pts)
        return StreamSeries(stream_id, meta["unit"], ts, [pts[t] for t in ts], meta.get("source", ""))

    def query_stream(self, stream_id: str, window: tuple[int, int],
                     resample_hz: float | None = None) -> StreamSeries:
        t0, t1 = window
        series = self.load_stream(stream_id)
        if resample_hz is None:
            return series.window(t0, t1)
        step = 1.0 / resample_hz
        if step != int(step):
            raise ValueError("resample rate must give an integer-second step")
        return resample_hold(series, t0, t1, int(step))

    # locations
    def append_locations(self, locations: Sequence[LocationSample], source: str = "gps") -> int:
        with (self.root / "locations" / f"{_safe_id(source)}.csv").open("a", encoding="utf-8") as fh:
            fh.writelines(f"{p.t},{p.lat!r},{p.lon!r},{p.alt!r}\n" for p in locations)
        return len(locations)

    def locations(self, window: tuple[int, int], source: str = "gps") -> list[LocationSample]:
        path = self.root / "locations" / f"{_safe_id(source)}.csv"
        if not path.exists():
            return []
        pts = {}
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    t, lat, lon, alt = line.strip().split(",")
                    pts[int(t)] = LocationSample(int(t), float(lat), float(lon), float(alt), source)
        return [pts[t] for t in sorted(pts) if window[0] <= t <= window[1]]

    # ingestion
    def ingest_activity(self, path, event_name: str | None = None) -> IngestResult:
        res = ingest_activity_csv(path, event_name)
        if self.add_event(res.event):
            for s in res.streams.values():
                self.append(s)
        return res


def read_locations_csv(path, source: str = "gps") -> list[LocationSample]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"t", "lat", "lon"} - set(reader.fieldnames or ())
        if missing:
            raise HeaderError(f"{path}: location file missing columns {sorted(missing)}")
        return [LocationSample(parse_timestamp(r["t"]), float(r["lat"]), float(r["lon"]),
                               float(r.get("alt") or 0.0), source) for r in reader]


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    tmp = Path(str(path) + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    os.replace(tmp, path)
