"""Acceptance criteria, one test each; outcomes are summarised at the end of the run."""

import csv
import io
import math
import warnings
from itertools import combinations

import numpy as np
import pytest

from hse import cli
from hse.gnb import (
    GraphBlock,
    GraphEdge,
    GraphNode,
    apply_time_decay,
    resting_cardiac_output,
    stroke_volume,
    update_block,
)
from hse.knowledge import (
    bundled_knowledge_path,
    bundled_rules_path,
    instantiate,
    load_knowledge,
    match_laminae,
)
from hse.learner import fit_line, fit_vam_family, fuse, memory_sweep, select_vam_model
from hse.metrics import AthleteProfile, aerobic_decoupling, cp_curve, hpa_events, pollutant_intake, spo2_events
from hse.personicle import StreamSeries
from hse.rules import (
    And,
    Compare,
    Detector,
    EventPredicate,
    Or,
    Rule,
    evaluate_rule,
    load_rules,
    parse_expression,
    pretty,
)

import oracles
import strategies
from conftest import DAY0, constant_ride, hse, month_of_rides, series, write_profile

CHAIN = ["lungs", "blood", "heart", "vasculature", "muscles"]


@pytest.fixture(scope="module")
def kb():
    return load_knowledge(bundled_knowledge_path())


def test_01_aerobic_decoupling(criterion, rng):
    with criterion("1. aerobic decoupling: half-ratio 50%, constant 0, power-scale invariance"):
        p = series([200.0] * 600)
        h = series([100.0] * 300 + [200.0] * 300)
        assert aerobic_decoupling(p, h) == pytest.approx(50.0, abs=1e-9)
        assert aerobic_decoupling(series([200.0] * 600), series([140.0] * 600)) == 0.0
        for _ in range(50):
            n = int(rng.integers(120, 2000))
            pw = rng.uniform(50, 400, n)
            hr = rng.uniform(90, 180, n)
            ad = aerobic_decoupling(series(pw), series(hr))
            assert ad == pytest.approx(oracles.brute_decoupling(pw.tolist(), hr.tolist()), abs=1e-9)
            assert aerobic_decoupling(series(pw * 10), series(hr)) == pytest.approx(ad, abs=1e-9)


def test_02_rule_dsl(criterion):
    with criterion("2. rule DSL: shipped rules parse to documented ASTs, 50 round-trips, 100 brute-force fixtures"):
        vol, press = load_rules(bundled_rules_path())
        assert vol.expr == Or(Compare("HR", ">", 140.0),
                              And(EventPredicate("Cycling"), Detector("detect-climb", "Altitude")))
        assert press.expr == Or(Detector("detect-spike", "HR"), Compare("Power", ">", 400.0, "W"))

        rng = np.random.default_rng(2)
        for _ in range(50):
            node = strategies.random_ast(rng, depth=4)
            assert parse_expression(pretty(node)) == node

        sizes = np.r_[np.full(5, 10_000), rng.integers(20, 3000, 95)]
        for n in sizes:
            streams, events, window = strategies.random_fixture(rng, int(n))
            node = strategies.random_ast(rng)
            rule = Rule("R", node, min_duration=int(rng.integers(1, 6)))
            got = [(e.start, e.end) for e in evaluate_rule(rule, streams, events, window)]
            want = oracles.brute_events(node, window, strategies.as_samples(streams),
                                        strategies.as_spans(events), rule.min_duration)
            assert got == want


def test_03_graph_update(criterion):
    with criterion("3. graph update: order independence, decay 100*e^-1, CO = SV * HR"):
        rng = np.random.default_rng(3)
        base = strategies.random_dag_block(rng, n=50)
        inputs = {f"n{i:02d}.x": float(rng.normal()) for i in range(5)}
        results = []
        for _ in range(10):
            b = base.copy()
            update_block(b, inputs, order=strategies.random_topological_order(b, rng))
            results.append(b.attributes())
        assert all(r == results[0] for r in results)

        node = GraphNode("a", attributes={"x": 100.0}, baseline={"x": 0.0}, tau_days={"x": 42.0})
        assert apply_time_decay(node, 42).attributes["x"] == pytest.approx(36.7879, abs=1e-4)
        assert apply_time_decay(GraphNode("a", attributes={"x": 100.0}, tau_days={"x": 1.0}), 1
                                ).attributes["x"] == pytest.approx(100 * math.exp(-1), abs=1e-6)

        block = GraphBlock("heart", [GraphNode("lv", attributes={"sv_ml": 70.0}),
                                     GraphNode("sa", attributes={"hr": 60.0}),
                                     GraphNode("heart", attributes={"co_ml_min": 0.0, "co_l_min": 0.0})])
        block.add_edge(GraphEdge("co", "lv", "heart", "sv_ml", "co_ml_min",
                                 {"kind": "product", "params": {"other": "sa.hr"}}))
        block.add_edge(GraphEdge("litres", "heart", "heart", "co_ml_min", "co_l_min",
                                 {"kind": "linear", "params": {"a": 0.001, "b": 0.0}}))
        update_block(block.validate())
        assert block.get("heart.co_l_min") == 4.2


def test_04_fusion(criterion):
    with criterion("4. fusion: weights (2/3, 1/3), convexity on 1000 cases, rmse-scale invariance"):
        _, w = fuse([(10.0, 0.5), (20.0, 1.0)])
        assert w[0] == pytest.approx(2 / 3, abs=1e-12) and w[1] == pytest.approx(1 / 3, abs=1e-12)
        rng = np.random.default_rng(4)
        for _ in range(1000):
            k = int(rng.integers(1, 6))
            est = list(zip(rng.uniform(20, 80, k).tolist(), rng.uniform(0.01, 10, k).tolist()))
            value, weights = fuse(est)
            vals = [v for v, _ in est]
            assert min(vals) <= value <= max(vals)
            c = float(rng.uniform(0.01, 100))
            _, scaled = fuse([(v, e * c) for v, e in est])
            assert scaled == pytest.approx(weights, rel=1e-12, abs=1e-15)


def test_05_least_squares(criterion):
    with criterion("5. least squares: normal-equation agreement on 100 datasets, 5.3% -> 5+ model"):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(3, 2000))
            x = rng.uniform(-100, 500, n)
            y = rng.normal(0, 3) * x + rng.normal(0, 50) + rng.normal(0, rng.uniform(0, 20), n)
            m = fit_line(x, y)
            a, b = oracles.normal_equations(x.tolist(), y.tolist())
            assert m.slope == pytest.approx(a, abs=1e-9) and m.intercept == pytest.approx(b, abs=1e-9)

        windows = [(float(v), float(0.003 * v + rng.normal(0, 0.3)), float(s))
                   for v, s in zip(rng.uniform(200, 1600, 600), rng.uniform(0, 12, 600))]
        fam = fit_vam_family(windows)
        for s, m in fam.models.items():
            sel = [(v, p) for v, p, g in windows if g >= s]
            a, b = oracles.normal_equations([v for v, _ in sel], [p for _, p in sel])
            assert m.slope == pytest.approx(a, abs=1e-9) and m.intercept == pytest.approx(b, abs=1e-9)
        assert select_vam_model(fam, 5.3)[0] == 5


def test_06_metric_thresholds(criterion):
    with criterion("6. thresholds: HPA 10 W/kg, PM2.5 intake 0.7 ug/min, SpO2 95% vs brute force"):
        p60 = AthleteProfile(60)
        for wpkg, fires in ((9.98, False), (10.83, True)):
            s = series([0.0] * 20 + [wpkg * 60] * 5 + [0.0] * 20)
            assert bool(hpa_events(s, p60)) == fires
        rng = np.random.default_rng(6)
        for _ in range(30):
            vals = np.where(rng.random(2000) < 0.03, rng.uniform(500, 1000, 2000), rng.uniform(0, 400, 2000))
            s = series(vals.round(0), t0=int(rng.integers(0, 10**6)))
            got = [(e.start, e.end) for e in hpa_events(s, p60)]
            assert got == oracles.brute_hpa(s.t.tolist(), s.values.tolist(), 60.0)

        prof = AthleteProfile(58, hr_rest=48, age_years=30)
        for _ in range(30):
            n = int(rng.integers(1, 120))
            t = np.arange(n) * 60
            hr = rng.uniform(40, 200, n)
            conc = rng.uniform(0, 250, n)
            ex = pollutant_intake(StreamSeries("hr", "bpm", t, hr), StreamSeries("pm25", "ug/m3", t, conc), prof)
            want_intake = []
            for h, c in zip(hr, conc):
                br = min(max(12 + 0.32 * (h - 48), 12), 60)
                hrr = min(max((h - 48) / (prof.hr_max - 48), 0), 1)
                want_intake.append(br * 0.007 * 58 * (1 + 2 * hrr) * 1e-3 * c)
            assert ex.intake_ug == pytest.approx(want_intake, rel=1e-12)
            want = [(int(t[i]), int(t[j - 1]) + 60) for i, j in oracles.brute_runs(v > 0.7 for v in want_intake)]
            assert [(e.start, e.end) for e in ex.events] == want

        assert spo2_events(series([95.0] * 30)) == [] and len(spo2_events(series([94.9]))) == 1
        for _ in range(30):
            v = rng.choice([93.0, 94.9, 95.0, 97.0, 99.0], size=int(rng.integers(1, 500)))
            s = series(v, t0=5)
            want = [(int(s.t[i]), int(s.t[j - 1])) for i, j in oracles.brute_runs(x < 95 for x in v)]
            assert [(e.start, e.end) for e in spo2_events(s)] == want


def _exhaustive_cp(acts, durations):
    """Best mean over any window of length >= d, by scanning every window length."""
    best = {}
    for a in acts:
        c = np.r_[0.0, np.cumsum(a)]
        for k in range(1, len(a) + 1):
            best[k] = max(best.get(k, 0.0), float(((c[k:] - c[:-k]) / k).max()))
    longest = max(best, default=0)
    suffix, run = {}, 0.0
    for k in range(longest, 0, -1):
        run = max(run, best[k])
        suffix[k] = run
    return [suffix.get(d, 0.0) for d in durations]


def test_07_cp_curve(criterion, kb, capsys, tmp_path):
    with criterion("7. CP curve: monotone on 100 histories, equals exhaustive search, readiness at 2.5 W/kg"):
        rng = np.random.default_rng(7)
        for i in range(100):
            big = i < 3
            acts = [np.abs(rng.normal(200, 120, int(rng.integers(50, 10_000 if big else 800)))).round(0)
                    for _ in range(1 if big else int(rng.integers(1, 4)))]
            streams = [series(a, t0=DAY0 + j * 86400) for j, a in enumerate(acts)]
            longest = max(len(a) for a in acts)
            durations = np.unique(np.r_[np.arange(1, min(longest, 300) + 1), cli.metrics.log_grid(longest + 5)])
            c = cp_curve(streams, durations=durations)
            assert np.all(np.diff(c.watts) <= 0)
            assert c.watts.tolist() == pytest.approx(_exhaustive_cp(acts, durations.tolist()), abs=1e-9)

        roi = kb.laminae["critical_power"].region("race_ready")
        assert cli.readiness({"cp_1000_wpkg": 152 / 60.8}, roi)[0] == "ready"
        for cp, mass in zip(rng.uniform(80, 300, 500), rng.uniform(45, 95, 500)):
            status, _ = cli.readiness({"cp_1000_wpkg": cp / mass}, roi)
            assert (status == "ready") == (cp / mass >= 2.5)

        root = tmp_path / "s"
        hse(capsys, "--store", root, "init", "--intent", "cycling",
            "--profile", write_profile(tmp_path / "p.json", mass_kg=60.8))
        hse(capsys, "--store", root, "ingest", constant_ride(tmp_path / "r.csv", DAY0 + 3600, 152.0))
        hse(capsys, "--store", root, "update", "--from", "2024-05-01", "--to", "2024-05-01")
        code, out, _ = hse(capsys, "--store", root, "query", "readiness", "--roi", "race_ready", "--day", "2024-05-01")
        assert code == 0 and next(csv.DictReader(io.StringIO(out)))["status"] == "ready"


def test_08_knowledge_pipeline(criterion, kb):
    with criterion("8. knowledge: cycling -> CP lamina, oxygen chain reachable, ACTN3 multipliers"):
        lam = match_laminae("cycling", kb)[0]
        assert lam.name == "critical_power"
        block = instantiate(lam, kb)
        adj = {}
        for e in block.edges:
            adj.setdefault(e.source, set()).add(e.target)
        reach = {CHAIN[0]}
        frontier = [CHAIN[0]]
        while frontier:
            for nxt in adj.get(frontier.pop(), ()):
                if nxt not in reach:
                    reach.add(nxt)
                    frontier.append(nxt)
        assert set(CHAIN) <= reach
        assert all(b in adj.get(a, ()) for a, b in zip(CHAIN, CHAIN[1:]))

        plain = {e.id: e.weight for e in instantiate(lam, kb, AthleteProfile(70)).edges}
        for genotype in ("1C 1T", "2C"):
            got = instantiate(lam, kb, AthleteProfile(70, genotypes={"rs1815739": genotype}))
            for e in got.edges:
                factor = 1.0
                for m in kb.genetic_modifiers:
                    if (m.rsid == "rs1815739" and sorted(m.genotype.split()) == sorted(genotype.split())
                            and m.edge_pattern[0] in got.nodes[e.source].tags
                            and m.edge_pattern[1] in got.nodes[e.target].tags):
                        factor *= m.multiplier
                assert e.weight == plain[e.id] * factor
            hi, li = (next(e.weight for e in got.edges if e.id == k) for k in ("hi_to_fiber", "li_to_fiber"))
            assert (hi, li) == ((1.0, 1.0) if genotype == "1C 1T" else (1.25, 0.9))


def _run_month(capsys, root, tmp_path):
    rides = month_of_rides(tmp_path / "rides") if not (tmp_path / "rides").exists() else \
        sorted((tmp_path / "rides").glob("*.csv"))
    hse(capsys, "--store", root, "init", "--intent", "cycling", "--profile", write_profile(tmp_path / "p.json"))
    hse(capsys, "--store", root, "ingest", *rides)
    code, out, err = hse(capsys, "--store", root, "update", "--from", "2024-05-01", "--to", "2024-05-30")
    assert code == 0, err
    _, daily, _ = hse(capsys, "--store", root, "report", "daily", "--from", "2024-05-01", "--to", "2024-05-30")
    return out, daily


def test_09_end_to_end(criterion, capsys, tmp_path):
    with criterion("9. end to end: byte-identical 30-day reports, CTL 40/30 y/58 kg/RHR 48 CO and SV"):
        (tmp_path / "rides").mkdir()
        first = _run_month(capsys, tmp_path / "a", tmp_path)
        second = _run_month(capsys, tmp_path / "b", tmp_path)
        assert first[0].encode() == second[0].encode() and first[1].encode() == second[1].encode()
        assert len(first[0].splitlines()) == 31

        root = tmp_path / "fixture"
        cfg = tmp_path / "hse.conf"
        cfg.write_text("ctl_source = observed\n")
        obs = tmp_path / "obs.csv"
        obs.write_text(f"t,ctl,mass_kg,hr_rest\n{DAY0},40,58,48\n")
        hse(capsys, "--store", root, "--config", cfg, "init", "--intent", "cycling",
            "--profile", write_profile(tmp_path / "p40.json", mass_kg=58.0, age_years=30.0, hr_rest=48.0))
        hse(capsys, "--store", root, "--config", cfg, "ingest", "--observations", obs)
        _, out, _ = hse(capsys, "--store", root, "--config", cfg, "update", "--from", "2024-05-01", "--to", "2024-05-01")
        row = next(csv.DictReader(io.StringIO(out)))
        co = resting_cardiac_output(58.0)
        assert float(row["ctl"]) == 40.0
        assert float(row["co_rest_l_min"]) == co == 0.070 * 58
        assert float(row["stroke_volume_ml"]) == stroke_volume(co, 48.0)
        assert stroke_volume(co, 48.0) == pytest.approx(1000 * 0.070 * 58 / 48, rel=1e-15)


def test_10_memory_sweep(criterion):
    with criterion("10. memory sweep: horizons 10-100 d overlap within 2 standard errors on stationary data"):
        rng = np.random.default_rng(10)
        days = 1500
        load = rng.gamma(2.0, 30.0, days)
        target = 45 + 0.01 * load + rng.normal(0, 2.0, days)
        horizons = list(range(10, 101, 10))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rows = memory_sweep(load, target, horizons)
        assert [r.horizon for r in rows] == horizons
        for a, b in combinations(rows, 2):
            assert abs(a.test_rmse - b.test_rmse) <= 2 * (a.stderr + b.stderr)
