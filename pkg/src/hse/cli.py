"""The ``hse`` command-line tool.

Typical session::

    hse --store st init --intent "cycling enduro" --profile me.json
    hse --store st ingest rides/*.csv --locations gps.csv --sensors aq.csv
    hse --store st update --from 2024-05-01 --to 2024-05-30
    hse --store st query readiness --roi race_ready --day 2024-05-30
    hse --store st report cp --day 2024-05-30

Outputs are CSV on stdout. Errors print one line ``E_<KIND>: message``
to stderr and exit with 2 (usage), 3 (data) or 4 (state).

Store layout, on top of the personicle store: ``state/init.json``,
``state/profile.json``, ``state/knowledge.json`` (a copy taken at init),
``state/block.json`` (the initial block), ``state/days/<date>.json`` (block
and report after each day), ``state/patches.jsonl`` (learned edges) and
``state/fusion.json``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import fcntl
import io
import json
import re
import shutil
import sys
import warnings
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Mapping, Sequence
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

import numpy as np

from . import gnb, knowledge, learner, metrics, personicle, rules

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STATE = 0, 2, 3, 4


class CliError(Exception):
    code = EXIT_DATA
    prefix = "E_DATA"


class UsageError(CliError):
    code = EXIT_USAGE
    prefix = "E_USAGE"


class StateError(CliError):
    code = EXIT_STATE
    prefix = "E_STATE"


# -- configuration ---------------------------------------------------------------

# PM2.5 and PM10 in ug/m3, O3/NO2 in ppb, CO in ppm: upper edges of the
# good / moderate / unhealthy-for-sensitive / unhealthy / very-unhealthy bands.
EPA_LABELS = ("good", "moderate", "unhealthy-sensitive", "unhealthy", "very-unhealthy", "hazardous")

DEFAULTS = {
    "timezone": "UTC",
    "rules": "",
    "sport": "Cycling",
    "ctl_source": "trimp",
    "ctl_horizon_days": "42",
    "hi_hrr": "0.8",
    "li_hrr": "0.3",
    "hpa_threshold_wpkg": "10",
    "hpa_window_s": "5",
    "cp_lookback_days": "42",
    "ad_gate_pct": "5",
    "edge_window_days": "30",
    "instantiate_max_depth": "",
    "fixed_point_rounds": "10",
    "fixed_point_tol": "1e-6",
    "sensors": "",
    "geo_max_km": "50",
    "geo_max_dt_s": "1800",
    "intake_threshold_ug.pm25": "0.7",
    "epa_bands.pm25": "12,35.4,55.4,150.4,250.4",
    "epa_bands.pm10": "54,154,254,354,424",
    "epa_bands.o3": "54,70,85,105,200",
    "epa_bands.no2": "53,100,360,649,1249",
    "epa_bands.co": "4.4,9.4,12.4,15.4,30.4",
}

OBSERVATION_COLUMNS = {"mass_kg": "kg", "hr_rest": "bpm", "hr_max": "bpm", "ctl": "load"}


@dataclasses.dataclass
class Config:
    values: dict

    @classmethod
    def load(cls, path: str | None) -> "Config":
        values = dict(DEFAULTS)
        if path:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
            for n, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{n}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in DEFAULTS and not key.startswith(("epa_bands.", "intake_threshold_ug.")):
                    raise UsageError(f"{path}:{n}: unknown config key {key!r}")
                values[key] = value
        return cls(values)

    def str(self, key: str) -> str:
        return self.values[key]

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise UsageError(f"config {key}: expected a number, got {self.values[key]!r}") from None

    def int(self, key: str) -> int:
        v = self.float(key)
        if v != int(v):
            raise UsageError(f"config {key}: expected an integer, got {self.values[key]!r}")
        return int(v)

    @property
    def tz(self) -> ZoneInfo:
        try:
            return ZoneInfo(self.values["timezone"])
        except (ZoneInfoNotFoundError, ValueError):
            raise UsageError(f"config timezone: unknown zone {self.values['timezone']!r}") from None

    def bands(self, pollutant: str) -> list[float] | None:
        raw = self.values.get(f"epa_bands.{pollutant}")
        if not raw:
            return None
        return [float(x) for x in raw.split(",")]

    def intake_threshold(self, pollutant: str) -> float | None:
        raw = self.values.get(f"intake_threshold_ug.{pollutant}")
        return float(raw) if raw else None


def pollutant_key(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def epa_band(value: float, edges: Sequence[float] | None) -> str:
    if edges is None:
        return "n/a"
    for label, hi in zip(EPA_LABELS, edges):
        if value <= hi:
            return label
    return EPA_LABELS[len(edges)] if len(edges) < len(EPA_LABELS) else EPA_LABELS[-1]


# -- time helpers ----------------------------------------------------------------

def parse_day(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise UsageError(f"invalid date {text!r}; expected YYYY-MM-DD") from None


def day_bounds(day: date, tz) -> tuple[int, int]:
    """Inclusive second range of a local calendar day."""
    start = datetime(day.year, day.month, day.day, tzinfo=tz)
    nxt = start + timedelta(days=1)
    return int(start.timestamp()), int(nxt.timestamp()) - 1


def day_of(t: int, tz) -> date:
    return datetime.fromtimestamp(int(t), tz).date()


def days_between(first: date, last: date) -> list[date]:
    if last < first:
        raise UsageError(f"--to {last} precedes --from {first}")
    return [first + timedelta(days=i) for i in range((last - first).days + 1)]


# -- session: store + state --------------------------------------------------------

@contextlib.contextmanager
def store_lock(root: Path, exclusive: bool):
    """One writer per store; read-only commands share the lock."""
    root.mkdir(parents=True, exist_ok=True)
    with open(root / ".lock", "a+") as fh:
        try:
            fcntl.flock(fh, (fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH) | fcntl.LOCK_NB)
        except BlockingIOError:
            raise StateError(f"store {root} is in use by another hse command") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


class Session:
    def __init__(self, root: Path, config: Config):
        self.root = root
        self.config = config
        self.store = personicle.Store(root)
        self.state = root / "state"
        self._streams: dict[str, personicle.StreamSeries] = {}

    # -- state files
    def require_init(self) -> dict:
        path = self.state / "init.json"
        if not path.exists():
            raise StateError(f"store {self.root} is not initialised; run hse init --intent ...")
        return json.loads(path.read_text())

    def profile(self) -> metrics.AthleteProfile:
        self.require_init()
        return metrics.AthleteProfile.from_dict(json.loads((self.state / "profile.json").read_text()))

    def knowledge(self) -> knowledge.KnowledgeBase:
        path = self.state / "knowledge.json"
        if not path.exists():
            raise CliError(f"knowledge file missing: {path}")
        return knowledge.load_knowledge(path)

    def lamina(self) -> knowledge.LaminaDefinition:
        return self.knowledge().laminae[self.require_init()["lamina"]]

    def initial_block(self) -> gnb.GraphBlock:
        return gnb.GraphBlock.from_json((self.state / "block.json").read_text())

    def day_path(self, day: date) -> Path:
        return self.state / "days" / f"{day.isoformat()}.json"

    def snapshot(self, day: date) -> dict:
        path = self.day_path(day)
        if not path.exists():
            raise StateError(f"day {day} has not been updated; run hse update --from {day} --to {day}")
        return json.loads(path.read_text())

    def snapshot_days(self) -> list[date]:
        d = self.state / "days"
        return sorted(date.fromisoformat(p.stem) for p in d.glob("*.json")) if d.exists() else []

    def patches(self) -> list[tuple[date, knowledge.KnowledgePatch]]:
        path = self.state / "patches.jsonl"
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                out.append((date.fromisoformat(d["effective"]), knowledge.KnowledgePatch.from_dict(d["patch"])))
        return out

    # -- store reads
    def stream(self, sid: str) -> personicle.StreamSeries | None:
        if sid not in self._streams:
            try:
                self._streams[sid] = self.store.load_stream(sid)
            except personicle.StreamNotFound:
                self._streams[sid] = None
        return self._streams[sid]

    def resolve_stream(self, name: str) -> str | None:
        """Stream id for a rule-level name: exact match first, then case-insensitive."""
        ids = self.store.stream_ids()
        if name in ids:
            return name
        folded = [s for s in ids if s.lower() == name.lower()]
        return folded[0] if len(folded) == 1 else None

    def activity_stream(self, activity: personicle.Event, sid: str) -> personicle.StreamSeries | None:
        s = self.stream(sid)
        if s is None:
            return None
        w = s.window(activity.start, activity.end)
        return w if len(w) else None

    def activities(self) -> list[personicle.Event]:
        return sorted(self.store.query_events("activity"), key=lambda e: (e.start, e.event_id))

    def observation(self, name: str, until: int) -> float | None:
        s = self.stream(f"obs_{name}")
        if s is None:
            return None
        i = int(np.searchsorted(s.t, until, side="right"))
        return float(s.values[i - 1]) if i else None

    def profile_on(self, base: metrics.AthleteProfile, until: int) -> metrics.AthleteProfile:
        changes = {k: v for k in ("mass_kg", "hr_rest", "hr_max") if (v := self.observation(k, until)) is not None}
        return dataclasses.replace(base, **changes) if changes else base

    def rules(self, path: str | None) -> list[rules.Rule]:
        path = path or self.config.str("rules") or str(knowledge.bundled_rules_path())
        if not Path(path).exists():
            raise CliError(f"rules file not found: {path}")
        return rules.load_rules(path)


# -- daily update ------------------------------------------------------------------

REPORT_COLUMNS = (
    ("ctl", "ctl.value"),
    ("mass_kg", "body.mass_kg"),
    ("hr_rest", "body.hr_rest"),
    ("hr_max", "body.hr_max"),
    ("co_rest_l_min", "heart.co_rest_l_min"),
    ("stroke_volume_ml", "left_ventricle.stroke_volume_ml"),
    ("co_max_l_min", "vasculature.blood_flow_l_min"),
    ("gene_healthy", "heart.healthy"),
    ("gene_pathological", "heart.pathological"),
    ("gene_net", "heart.net"),
    ("cp_60_w", "cp_60.value"),
    ("cp_300_w", "cp_300.value"),
    ("cp_1000_w", "cp_1000.value"),
    ("cp_3600_w", "cp_3600.value"),
    ("cp_1000_wpkg", "cp_1000_wpkg.value"),
    ("vo2max", "vo2max.value"),
    ("hi_h", "hi_exercise.value"),
    ("li_h", "li_exercise.value"),
    ("hpa_count", "hpa.value"),
)


@dataclasses.dataclass
class DailyReport:
    day: date
    values: dict  # column -> float or None
    flags: list

    @property
    def columns(self) -> list[str]:
        return list(self.values)

    def row(self) -> list[str]:
        return [self.day.isoformat(), *(_fmt(v) for v in self.values.values()), ";".join(self.flags)]

    def to_dict(self) -> dict:
        return {"date": self.day.isoformat(), "columns": self.columns,
                "values": [self.values[c] for c in self.columns], "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DailyReport":
        return cls(date.fromisoformat(d["date"]), dict(zip(d["columns"], d["values"])), list(d["flags"]))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_csv(reports: Sequence[DailyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if reports:
        w.writerow(["date", *reports[0].columns, "flags"])
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def _try_get(block: gnb.GraphBlock, ref: str):
    try:
        return float(block.get(ref))
    except (gnb.GraphError, KeyError):
        return None


def _has(block: gnb.GraphBlock, ref: str) -> bool:
    return _try_get(block, ref) is not None


class Updater:
    """Runs the daily cycle: decay, interface events, inputs, observations, propagation, report."""

    def __init__(self, session: Session, rule_list: Sequence[rules.Rule]):
        self.s = session
        self.cfg = session.config
        self.tz = self.cfg.tz
        self.rules = list(rule_list)
        self.base_profile = session.profile()
        self.acts = session.activities()
        self._trimp: dict[str, float] = {}
        self._mean_max: dict = {}
        self.sport = self.cfg.str("sport")

    def _acts_on(self, day: date) -> list[personicle.Event]:
        return [a for a in self.acts if day_of(a.start, self.tz) == day]

    def _load(self, a: personicle.Event) -> float:
        if a.event_id not in self._trimp:
            hr = self.s.activity_stream(a, "hr")
            prof = self.s.profile_on(self.base_profile, a.end)
            self._trimp[a.event_id] = metrics.trimp(hr, prof) if hr is not None else 0.0
        return self._trimp[a.event_id]

    def _ctl(self, day: date, t_end: int) -> float:
        source = self.cfg.str("ctl_source")
        if source == "observed":
            v = self.s.observation("ctl", t_end)
            return 0.0 if v is None else v
        if source != "trimp":
            raise UsageError(f"config ctl_source must be 'trimp' or 'observed', got {source!r}")
        loads = [metrics.DailyLoad(day_of(a.start, self.tz), self._load(a))
                 for a in self.acts if a.start <= t_end]
        return metrics.ctl(loads, day, self.cfg.int("ctl_horizon_days"))

    def _rule_events(self, a: personicle.Event, flags: list) -> dict[str, list[rules.InterfaceEvent]]:
        typed = [a, dataclasses.replace(a, event_type=str(a.parameters.get("sport", self.sport)))]
        out = {}
        for rule in self.rules:
            streams = {}
            for name in sorted(rule.streams):
                sid = self.s.resolve_stream(name)
                series = self.s.activity_stream(a, sid) if sid else None
                if series is None:
                    break
                streams[name] = series.renamed(name)
            else:
                out[rule.name] = rules.evaluate_rule(rule, streams, typed, (a.start, a.end))
                continue
            flags.append(f"rule-skipped:{rule.name}:{a.event_name}")
        return out

    def run_day(self, block: gnb.GraphBlock, day: date, dt_days: float) -> DailyReport:
        t0, t1 = day_bounds(day, self.tz)
        prof = self.s.profile_on(self.base_profile, t1)
        flags: list[str] = []
        acts = self._acts_on(day)

        # interface events and event-derived inputs (reset every day)
        minutes = {r.name: 0.0 for r in self.rules}
        counts = {r.name: 0 for r in self.rules}
        hi_s = li_s = 0
        hpa_n = 0
        hr_sum, hr_n = 0.0, 0
        for a in acts:
            for name, evs in self._rule_events(a, flags).items():
                counts[name] += len(evs)
                minutes[name] += sum(e.duration for e in evs) / 60.0
            hr = self.s.activity_stream(a, "hr")
            if hr is not None:
                frac = prof.hr_reserve_fraction(hr.values)
                hi_s += int(np.count_nonzero(frac >= self.cfg.float("hi_hrr")))
                li_s += int(np.count_nonzero((frac >= self.cfg.float("li_hrr")) & (frac < self.cfg.float("hi_hrr"))))
                hr_sum += float(hr.values.sum())
                hr_n += len(hr)
            power = self.s.activity_stream(a, "power")
            if power is not None:
                hpa_n += len(metrics.hpa_events(power, prof, self.cfg.float("hpa_threshold_wpkg"),
                                                self.cfg.int("hpa_window_s")))
        inputs = {"ctl.value": self._ctl(day, t1), "hi_exercise.value": hi_s / 3600.0,
                  "li_exercise.value": li_s / 3600.0, "hpa.value": float(hpa_n)}
        inputs.update({f"{name}.value": m for name, m in minutes.items()})
        if hr_n:
            inputs["ride_hr.value"] = hr_sum / hr_n
        inputs = {k: v for k, v in inputs.items() if _has(block, k)}

        # observations (pinned for this cycle)
        for attr in ("mass_kg", "hr_rest", "hr_max"):
            v = self.s.observation(attr, t1)
            if v is not None and _has(block, f"body.{attr}"):
                gnb.set_observation(block, f"body.{attr}", v, "biology")
        cp_dims = sorted((n for n in block.nodes if re.fullmatch(r"cp_\d+", n)), key=lambda n: int(n[3:]))
        if cp_dims:
            lookback = self.cfg.int("cp_lookback_days")
            rides = [p for a in self.acts if t1 - lookback * 86400 < a.end <= t1
                     and (p := self.s.activity_stream(a, "power")) is not None]
            if rides:
                curve = metrics.cp_curve(rides, [int(n[3:]) for n in cp_dims], lookback, as_of=t1,
                                         cache=self._mean_max)
                for n, w in zip(cp_dims, curve.watts.tolist()):
                    gnb.set_observation(block, f"{n}.value", w, "utility")
        fusion = self.s.state / "fusion.json"
        if fusion.exists() and _has(block, "vo2max.value"):
            f = json.loads(fusion.read_text())
            if date.fromisoformat(f["as_of"]) <= day:
                gnb.set_observation(block, "vo2max.value", f["vo2max"], "utility")

        gnb.update_block(block, inputs, dt_days=dt_days, rounds=self.cfg.int("fixed_point_rounds"),
                         tol=self.cfg.float("fixed_point_tol"))

        values = {col: _try_get(block, ref) for col, ref in REPORT_COLUMNS}
        values["activities"] = len(acts)
        for r in self.rules:
            values[f"{r.name}_events"] = counts[r.name]
            values[f"{r.name}_min"] = _try_get(block, f"{r.name}.value")
        flags = [f"{b.id}:{f}" for b in block.iter_blocks() for f in b.flags] + flags
        return DailyReport(day, values, flags)

    def run(self, first: date, last: date) -> list[DailyReport]:
        prior = [d for d in self.s.snapshot_days() if d < first]
        patches = self.s.patches()
        if prior:
            prev = prior[-1]
            block = gnb.GraphBlock.from_dict(self.s.snapshot(prev)["block"])
        else:
            prev = None
            block = self.s.initial_block()
        reports = []
        for day in days_between(first, last):
            for eff, patch in patches:
                if eff <= day and (prev is None or eff > prev):
                    knowledge.apply_patch(block, patch)
            dt = 1.0 if prev is None else float((day - prev).days)
            report = self.run_day(block, day, dt)
            _write_json(self.s.day_path(day), {"date": day.isoformat(), "block": block.to_dict(),
                                                "report": report.to_dict()})
            reports.append(report)
            prev = day
        return reports


# -- commands ------------------------------------------------------------------------

def _out(text: str) -> None:
    sys.stdout.write(text)


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


def cmd_init(s: Session, args) -> int:
    state = s.state
    if (state / "init.json").exists() and s.snapshot_days() and not args.force:
        raise StateError("store already initialised with updated days; pass --force to start over")
    src = Path(args.knowledge) if args.knowledge else knowledge.bundled_knowledge_path()
    if not src.exists():
        raise CliError(f"knowledge file not found: {src}")
    base = knowledge.load_knowledge(src)
    try:
        prof_doc = json.loads(Path(args.profile).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read profile {args.profile}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"profile {args.profile}: invalid JSON: {exc}") from None
    profile = metrics.AthleteProfile.from_dict(prof_doc).validate()
    matches = knowledge.match_laminae(args.intent, base)
    if args.lamina:
        if args.lamina not in base.laminae:
            raise CliError(f"unknown lamina {args.lamina!r}; have {sorted(base.laminae)}")
        lamina = base.laminae[args.lamina]
    elif matches:
        lamina = matches[0]
    else:
        raise CliError(f"no lamina matches intent {args.intent!r}; have {sorted(base.laminae)}")
    depth = s.config.int("instantiate_max_depth") if s.config.str("instantiate_max_depth") else None
    if depth is not None and depth < 0:
        raise UsageError(f"config instantiate_max_depth: must be non-negative, got {depth}")
    block = knowledge.instantiate(lamina, base, profile, max_depth=depth)
    if not args.no_patches:
        for p in base.patches:
            if depth is not None and not knowledge.select_edges(block, p.selector):
                continue  # the edge was cut by the depth cap
            knowledge.apply_patch(block, p)
    if state.exists() and args.force:
        shutil.rmtree(state)
    state.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, state / "knowledge.json")
    _write_json(state / "profile.json", profile.to_dict())
    (state / "block.json").write_text(block.to_json() + "\n", encoding="utf-8")
    _write_json(state / "init.json", {"intent": args.intent, "lamina": lamina.name,
                                      "knowledge_source": str(src), "candidates": [m.name for m in matches]})
    w = _writer()
    w.writerow(["lamina", "nodes", "edges", "candidates"])
    n_nodes = sum(1 for _ in block.iter_nodes())
    n_edges = sum(len(b.edges) for b in block.iter_blocks())
    w.writerow([lamina.name, n_nodes, n_edges, ";".join(m.name for m in matches)])
    return EXIT_OK


def _ingest_observations(s: Session, path: str) -> int:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in (reader.fieldnames or []) if c != "t"]
        if "t" not in (reader.fieldnames or []) or not cols:
            raise personicle.HeaderError(f"{path}: observation file needs t and at least one of "
                                         f"{sorted(OBSERVATION_COLUMNS)}")
        bad = [c for c in cols if c not in OBSERVATION_COLUMNS]
        if bad:
            raise personicle.HeaderError(f"{path}: unrecognised observation columns {bad}")
        pts: dict[str, list] = {c: [] for c in cols}
        for row in reader:
            t = personicle.parse_timestamp(row["t"])
            for c in cols:
                if row.get(c, "").strip():
                    pts[c].append((t, float(row[c])))
    n = 0
    for c, p in pts.items():
        if p:
            p.sort()
            t, v = zip(*p)
            n += s.store.append(personicle.StreamSeries(f"obs_{c}", OBSERVATION_COLUMNS[c], t, v, Path(path).name))
    return n


def cmd_ingest(s: Session, args) -> int:
    w = _writer()
    w.writerow(["kind", "id", "rows", "skipped", "status"])
    for path in args.csv:
        res = personicle.ingest_activity_csv(path, args.name if len(args.csv) == 1 else None)
        ev = dataclasses.replace(res.event, parameters={**res.event.parameters, "sport": args.sport or s.config.str("sport")})
        new = s.store.add_event(ev)
        if new:
            for series in res.streams.values():
                s.store.append(series)
        skipped = ";".join(f"{k}={v}" for k, v in sorted(res.skipped.items()))
        w.writerow(["activity", ev.event_id, res.rows, skipped, "added" if new else "duplicate"])
    if args.locations:
        locs = personicle.read_locations_csv(args.locations)
        w.writerow(["locations", args.locations, s.store.append_locations(locs), "", "added"])
    if args.observations:
        w.writerow(["observations", args.observations, _ingest_observations(s, args.observations), "", "added"])
    if args.sensors:
        table = personicle.SensorTable.read_csv(args.sensors)
        dest = s.root / "sensors.csv"
        lines = Path(args.sensors).read_text(encoding="utf-8").splitlines()
        with dest.open("a", encoding="utf-8") as fh:
            if dest.stat().st_size == 0:
                fh.write(lines[0] + "\n")
            fh.writelines(line + "\n" for line in lines[1:] if line.strip())
        w.writerow(["sensors", args.sensors, len(table), "", "added"])
    return EXIT_OK


def cmd_rules(s: Session, args) -> int:
    if args.action == "check":
        rule_list = s.rules(args.file)
        w = _writer()
        w.writerow(["rule", "min_duration_s", "expression"])
        for r in rule_list:
            w.writerow([r.name, r.min_duration, rules.pretty(r.expr)])
        return EXIT_OK
    rule_list = s.rules(args.file)
    tz = s.config.tz
    acts = s.activities()
    if args.date_from:
        acts = [a for a in acts if day_of(a.start, tz) >= parse_day(args.date_from)]
    if args.date_to:
        acts = [a for a in acts if day_of(a.start, tz) <= parse_day(args.date_to)]
    s.require_init()
    upd = Updater(s, rule_list)
    w = _writer()
    w.writerow(["rule", "activity", "start", "end", "duration_s", "attributes"])
    flags: list[str] = []
    for a in acts:
        for name, evs in upd._rule_events(a, flags).items():
            for e in evs:
                attrs = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(e.attributes.items()))
                w.writerow([name, a.event_id, e.start, e.end, e.duration, attrs])
    for f in flags:
        sys.stderr.write(f"warning: {f}\n")
    return EXIT_OK


def cmd_update(s: Session, args) -> int:
    s.require_init()
    rule_list = s.rules(args.rules)
    s.knowledge()  # startup check
    reports = Updater(s, rule_list).run(parse_day(args.date_from), parse_day(args.date_to))
    _out(reports_csv(reports))
    return EXIT_OK


def _day_state(s: Session, day: date) -> tuple[gnb.GraphBlock, dict]:
    snap = s.snapshot(day)
    block = gnb.GraphBlock.from_dict(snap["block"])
    state = {}
    for dim in s.lamina().dimensions:
        v = _try_get(block, f"{dim}.value")
        if v is not None:
            state[dim] = v
    return block, state


def readiness(state: Mapping[str, float], roi: knowledge.RegionOfInterest) -> tuple[str, float]:
    dist = knowledge.distance_to_region(state, roi)
    return ("ready" if knowledge.region_membership(state, roi) else "not-ready"), dist


def cmd_query(s: Session, args) -> int:
    s.require_init()
    w = _writer()
    if args.what == "readiness":
        if not args.roi or not args.day:
            raise UsageError("query readiness needs --roi and --day")
        day = parse_day(args.day)
        lam = s.lamina()
        try:
            roi = lam.region(args.roi)
        except KeyError:
            raise CliError(f"lamina {lam.name} has no region {args.roi!r}; have "
                           f"{[r.label for r in lam.regions]}") from None
        _, state = _day_state(s, day)
        status, dist = readiness(state, roi)
        w.writerow(["roi", "date", "status", "distance"])
        w.writerow([roi.label, day.isoformat(), status, repr(dist)])
        return EXIT_OK
    if args.what == "exposure":
        return _query_exposure(s, args)
    if not args.date_from or not args.date_to:
        raise UsageError(f"query {args.what} needs --from and --to")
    days = days_between(parse_day(args.date_from), parse_day(args.date_to))
    snaps = [(d, gnb.GraphBlock.from_dict(s.snapshot(d)["block"])) for d in days]
    if args.what == "heart":
        w.writerow(["date", "healthy", "pathological", "net"])
        for d, block in snaps:
            gb = gnb.gene_balance(block, d)
            w.writerow([d.isoformat(), repr(gb.healthy), repr(gb.pathological), repr(gb.net)])
    else:
        w.writerow(["date", "stroke_volume_ml", "co_rest_l_min", "hr_rest"])
        for d, block in snaps:
            w.writerow([d.isoformat(), *(_fmt(_try_get(block, r)) for r in (
                "left_ventricle.stroke_volume_ml", "heart.co_rest_l_min", "heart.hr_rest"))])
    return EXIT_OK


def _find_activity(s: Session, key: str) -> personicle.Event:
    for a in s.activities():
        if key in (a.event_id, a.event_name):
            return a
    raise CliError(f"no activity {key!r}")


def _query_exposure(s: Session, args) -> int:
    if not args.activity:
        raise UsageError("query exposure needs --activity")
    a = _find_activity(s, args.activity)
    locs = s.store.locations((a.start, a.end))
    if not locs:
        raise CliError(f"activity {a.event_id} has no location stream")
    hr = s.activity_stream(a, "hr")
    if hr is None:
        raise CliError(f"activity {a.event_id} has no heart-rate stream")
    sensors_path = args.sensors or s.config.str("sensors") or str(s.root / "sensors.csv")
    if not Path(sensors_path).exists():
        raise CliError("no sensor table; ingest one with --sensors or set config 'sensors'")
    table = personicle.SensorTable.read_csv(sensors_path)
    geo = personicle.attach_geo_context(locs, table, s.config.float("geo_max_km"), s.config.int("geo_max_dt_s"))
    profile = s.profile_on(s.profile(), a.end)
    hr_m = metrics.minute_means(hr)
    w = _writer()
    w.writerow(["pollutant", "minute_t", "hr_bpm", "concentration", "unit", "breathing_rate_min",
                "tidal_volume_l", "intake_ug", "epa_band", "event"])
    totals = []
    for pol in sorted(geo.streams):
        if args.pollutant and pollutant_key(pol) != pollutant_key(args.pollutant):
            continue
        key = pollutant_key(pol)
        conc = metrics.minute_means(geo.streams[pol])
        thr = s.config.intake_threshold(key)
        exp = metrics.pollutant_intake(hr_m, conc, profile, thr if thr is not None else float("inf"),
                                       rule_name=f"High{pol.upper()}Intake")
        cmap = dict(zip(conc.t.tolist(), conc.values.tolist()))
        hmap = dict(zip(hr_m.t.tolist(), hr_m.values.tolist()))
        bands = s.config.bands(key)
        for i, t in enumerate(exp.t.tolist()):
            in_event = any(e.start <= t < e.end for e in exp.events)
            w.writerow([pol, t, repr(hmap[t]), repr(cmap[t]), conc.unit, repr(float(exp.breathing_rate[i])),
                        repr(float(exp.tidal_volume_l[i])), repr(float(exp.intake_ug[i])),
                        epa_band(cmap[t], bands), exp.events[0].rule_name if in_event else ""])
        totals.append([pol, repr(exp.total_ug), len(exp.t), len(exp.events), geo.gaps.get(pol, 0)])
    _out("\n")
    w.writerow(["pollutant", "total_ug", "minutes", "events", "location_gaps"])
    w.writerows(totals)
    return EXIT_OK


def _as_of_day(s: Session, text: str | None) -> date:
    if text:
        return parse_day(text)
    acts = s.activities()
    if not acts:
        raise CliError("store has no activities")
    return day_of(acts[-1].end, s.config.tz)


def cmd_learn(s: Session, args) -> int:
    s.require_init()
    tz = s.config.tz
    day = _as_of_day(s, args.as_of)
    t_end = day_bounds(day, tz)[1]
    w = _writer()
    if args.what == "edges":
        hr, power = s.stream("hr"), s.stream("power")
        if hr is None or power is None:
            raise CliError("learning the HR->power edge needs hr and power streams")
        fit = learner.fit_parallel_edge(hr, power, s.activities(), s.config.float("ad_gate_pct"), as_of=t_end,
                                        window_days=s.config.int("edge_window_days"))
        w.writerow(["activity", "aerobic_decoupling_pct", "accepted"])
        for eid, ad in sorted(fit.decoupling.items()):
            w.writerow([eid, "" if ad is None else repr(ad), eid in fit.accepted])
        if fit.model is None:
            sys.stderr.write(f"no-update: {len(fit.accepted)} qualifying activities (need 2)\n")
            return EXIT_OK
        patch = fit.model.to_patch({"edge_id": "hr_to_power"}, f"parallel-observation fit as of {day}")
        knowledge.select_edges(s.initial_block(), patch.selector) or _raise(
            CliError("block has no edge hr_to_power to update"))
        if not args.dry_run:
            with (s.state / "patches.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"effective": (day + timedelta(days=1)).isoformat(),
                                     "patch": patch.to_dict()}, sort_keys=True) + "\n")
        _out("\n" + json.dumps(patch.to_dict(), sort_keys=True) + "\n")
        return EXIT_OK
    return _learn_fusion(s, day, t_end, w, args.dry_run)


def _raise(exc):
    raise exc


def _trailing_mean(daily: Mapping[date, float], day: date, horizon: int) -> float | None:
    lo = day - timedelta(days=horizon - 1)
    vals = [v for d, v in daily.items() if lo <= d <= day]
    return sum(vals) / len(vals) if vals else None


def fusion_components(s: Session, as_of_end: int) -> dict[str, dict[date, float]]:
    """Daily features for each sensor modality, keyed by local day."""
    tz = s.config.tz
    profile = s.profile()
    acts = [a for a in s.activities() if a.end <= as_of_end]
    windows_by_day: dict[date, list] = {}
    eff: dict[date, list] = {}
    for a in acts:
        d = day_of(a.start, tz)
        prof = s.profile_on(profile, a.end)
        alt, pw, spd, hr = (s.activity_stream(a, k) for k in ("altitude", "power", "speed", "hr"))
        if alt is not None and pw is not None and spd is not None:
            windows_by_day.setdefault(d, []).extend(learner.vam_windows(alt, pw, spd, prof.mass_kg))
        if pw is not None and hr is not None:
            _, ih, ip = np.intersect1d(hr.t, pw.t, assume_unique=True, return_indices=True)
            hv, pv = hr.values[ih], pw.values[ip]
            ok = hv > 0
            if ok.any():
                eff.setdefault(d, []).append((float(pv[ok].sum()), float(hv[ok].sum())))
    features: dict[str, dict[date, float]] = {}
    all_windows = [w for ws in windows_by_day.values() for w in ws]
    climbing = [w for w in all_windows if w[0] > 0]
    if len(climbing) >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # sparse slope strata are simply omitted
            family = learner.fit_vam_family(climbing)
        if family:
            features["vam"] = {}
            for d, ws in sorted(windows_by_day.items()):
                preds = [float(learner.select_vam_model(family, g)[1].predict(v)) for v, _, g in ws if v > 0]
                if preds:
                    features["vam"][d] = sum(preds) / len(preds)
    if eff:
        features["hr_power"] = {d: sum(p for p, _ in v) / sum(h for _, h in v) for d, v in sorted(eff.items())}
    return features


def _learn_fusion(s: Session, day: date, t_end: int, w, dry_run: bool) -> int:
    tz = s.config.tz
    profile = s.profile_on(s.profile(), t_end)
    rides = []
    for a in s.activities():
        if a.end <= t_end and (p := s.activity_stream(a, "power")) is not None:
            rides.append(p)
    best = learner.daily_best_power(rides, 240, day_of=lambda t: day_of(t, tz))
    if not best:
        raise CliError("no ride with a 4-minute power window; cannot build VO2max ground truth")
    truth = dict(learner.ground_truth_vo2max(best, profile.mass_kg, 42, end=day))
    estimates, names, rmses = [], [], []
    for name, daily in sorted(fusion_components(s, t_end).items()):
        xs, ys = [], []
        for d in sorted(truth):
            f = _trailing_mean(daily, d, 42)
            if f is not None:
                xs.append(f)
                ys.append(truth[d])
        if len(xs) < 3:
            continue
        cut = max(2, learner.chronological_split(len(xs)))
        model = learner.fit_line(xs[:cut], ys[:cut])
        current = _trailing_mean(daily, day, 42)
        if current is None:
            continue
        estimates.append((float(model.predict(current)), model.train_rmse))
        names.append(name)
        rmses.append(learner.rmse(model, xs[cut:], ys[cut:]) if len(xs) > cut else None)
    if not estimates:
        raise CliError("not enough data to train any VO2max component model")
    value, weights = learner.fuse(estimates)
    w.writerow(["component", "vo2max", "train_rmse", "test_rmse", "weight"])
    for name, (v, e), te, wt in zip(names, estimates, rmses, weights):
        w.writerow([name, repr(v), repr(e), "" if te is None else repr(te), repr(wt)])
    w.writerow(["fused", repr(value), "", "", repr(1.0)])
    if day in truth:
        w.writerow(["ground_truth", repr(truth[day]), "", "", ""])
    if not dry_run:
        _write_json(s.state / "fusion.json", {
            "as_of": day.isoformat(), "vo2max": value,
            "components": [{"name": n, "vo2max": v, "train_rmse": e, "weight": wt}
                           for n, (v, e), wt in zip(names, estimates, weights)]})
    return EXIT_OK


def cp_report_rows(curve: metrics.CpCurve, mass_kg: float,
                   lamina: knowledge.LaminaDefinition | None) -> list[list]:
    rows = [[d, repr(p), repr(p / mass_kg), "cp"] for d, p in zip(curve.durations.tolist(), curve.watts.tolist())]
    for roi in (lamina.regions if lamina else ()):
        for dim, (lo, hi) in sorted(roi.bounds.items()):
            if not dim.endswith("_wpkg"):
                continue
            for side, bound in (("min", lo), ("max", hi)):
                if not np.isfinite(bound):
                    continue
                rows.extend([d, repr(bound * mass_kg), repr(float(bound)), f"roi:{roi.label}:{side}"]
                            for d in curve.durations.tolist())
    return rows


def cmd_report(s: Session, args) -> int:
    s.require_init()
    w = _writer()
    if args.what == "daily":
        if not args.date_from or not args.date_to:
            raise UsageError("report daily needs --from and --to")
        days = days_between(parse_day(args.date_from), parse_day(args.date_to))
        _out(reports_csv([DailyReport.from_dict(s.snapshot(d)["report"]) for d in days]))
        return EXIT_OK
    day = _as_of_day(s, args.day)
    t_end = day_bounds(day, s.config.tz)[1]
    lookback = s.config.int("cp_lookback_days")
    rides = [p for a in s.activities() if t_end - lookback * 86400 < a.end <= t_end
             and (p := s.activity_stream(a, "power")) is not None]
    durations = metrics.log_grid(metrics.CP_MAX_DURATION, args.points) if args.grid == "log" else None
    curve = metrics.cp_curve(rides, durations, lookback, as_of=t_end)
    mass = s.profile_on(s.profile(), t_end).mass_kg
    w.writerow(["duration_s", "watts", "wpkg", "series"])
    w.writerows(cp_report_rows(curve, mass, s.lamina()))
    return EXIT_OK


def cmd_state(s: Session, args) -> int:
    s.require_init()
    if args.day:
        _out(json.dumps(s.snapshot(parse_day(args.day))["block"], indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    days = s.snapshot_days()
    block = gnb.GraphBlock.from_dict(s.snapshot(days[-1])["block"]) if days else s.initial_block()
    _out(block.to_json() + "\n")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


READ_ONLY = {"query", "report", "state"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hse", description="Personal health-state estimation from sensor streams.")
    p.add_argument("--store", default=".", help="store directory (default: current directory)")
    p.add_argument("--config", help="key=value configuration file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("init", help="choose a lamina for an intent and instantiate the model")
    sp.add_argument("--intent", required=True)
    sp.add_argument("--knowledge", help="knowledge JSON (default: bundled cycling/cardiac file)")
    sp.add_argument("--profile", required=True, help="athlete profile JSON")
    sp.add_argument("--lamina", help="use this lamina instead of the best intent match")
    sp.add_argument("--no-patches", action="store_true", help="skip the knowledge file's patches")
    sp.add_argument("--force", action="store_true", help="discard existing state")

    sp = sub.add_parser("ingest", help="add activity CSVs and context data to the store")
    sp.add_argument("csv", nargs="*")
    sp.add_argument("--name", help="event name (single file only; default: file stem)")
    sp.add_argument("--sport", help="activity sport, matched by rule event predicates")
    sp.add_argument("--locations", help="CSV t,lat,lon[,alt]")
    sp.add_argument("--observations", help="CSV t plus any of " + ",".join(OBSERVATION_COLUMNS))
    sp.add_argument("--sensors", help="sensor table CSV t,lat,lon,pollutant,value,unit")

    sp = sub.add_parser("rules", help="check or run interface-event rules")
    sp.add_argument("action", choices=["check", "run"])
    sp.add_argument("file", nargs="?", help="rules file (default: config 'rules' or bundled)")
    sp.add_argument("--from", dest="date_from")
    sp.add_argument("--to", dest="date_to")

    sp = sub.add_parser("update", help="run the daily update cycle over a date range")
    sp.add_argument("--from", dest="date_from", required=True)
    sp.add_argument("--to", dest="date_to", required=True)
    sp.add_argument("--rules")

    sp = sub.add_parser("query", help="readiness, exposure, heart balance, stroke volume")
    sp.add_argument("what", choices=["readiness", "exposure", "heart", "sv"])
    sp.add_argument("--roi")
    sp.add_argument("--day")
    sp.add_argument("--activity")
    sp.add_argument("--pollutant")
    sp.add_argument("--sensors")
    sp.add_argument("--from", dest="date_from")
    sp.add_argument("--to", dest="date_to")

    sp = sub.add_parser("learn", help="fit the HR->power edge or fuse VO2max estimates")
    sp.add_argument("what", choices=["edges", "fusion"])
    sp.add_argument("--as-of")
    sp.add_argument("--dry-run", action="store_true")

    sp = sub.add_parser("report", help="CP curve or daily reports as CSV")
    sp.add_argument("what", choices=["cp", "daily"])
    sp.add_argument("--day")
    sp.add_argument("--from", dest="date_from")
    sp.add_argument("--to", dest="date_to")
    sp.add_argument("--grid", choices=["log", "full"], default="log")
    sp.add_argument("--points", type=int, default=60)

    sp = sub.add_parser("state", help="dump the serialised block")
    sp.add_argument("action", choices=["dump"])
    sp.add_argument("--day")
    return p


COMMANDS = {"init": cmd_init, "ingest": cmd_ingest, "rules": cmd_rules, "update": cmd_update,
            "query": cmd_query, "learn": cmd_learn, "report": cmd_report, "state": cmd_state}

_DATA_ERRORS = (personicle.PersonicleError, rules.RuleError, knowledge.KnowledgeError, metrics.ProfileError,
                metrics.NotComputable, OSError, json.JSONDecodeError)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = Config.load(args.config)
        root = Path(args.store)
        exclusive = args.command not in READ_ONLY and not (args.command == "rules" and args.action == "check")
        with store_lock(root, exclusive):
            return COMMANDS[args.command](Session(root, config), args)
    except BrokenPipeError:  # output consumer went away (e.g. piped into head)
        sys.stderr.close()
        return EXIT_OK
    except CliError as exc:
        code, prefix, msg = exc.code, exc.prefix, str(exc)
    except gnb.GraphError as exc:
        code, prefix, msg = EXIT_STATE, "E_STATE", str(exc)
    except _DATA_ERRORS as exc:
        code, prefix, msg = EXIT_DATA, "E_DATA", str(exc)
    except ValueError as exc:
        code, prefix, msg = EXIT_DATA, "E_DATA", str(exc)
    sys.stderr.write(f"{prefix}: {' '.join(msg.split())}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
