import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hse.metrics import (
    AthleteProfile,
    CpCurve,
    DailyLoad,
    NotComputable,
    ProfileError,
    active_time,
    aerobic_decoupling,
    cp_curve,
    ctl,
    ctl_exponential,
    govss,
    graded_power,
    hpa_events,
    log_grid,
    mean_max_power,
    metrics_csv,
    minute_means,
    pollutant_intake,
    sleep_score,
    spo2_events,
    stress_score,
    trimp,
    vam,
)
from hse.personicle import StreamSeries

import oracles
from conftest import series

D0 = date(2024, 1, 1)


class TestProfile:
    def test_default_hr_max(self):
        assert AthleteProfile(70, age_years=30).hr_max == 190

    def test_validate(self):
        with pytest.raises(ProfileError):
            AthleteProfile(0).validate()
        with pytest.raises(ProfileError):
            AthleteProfile(70, hr_rest=200, hr_max=190).validate()

    def test_round_trip_and_unknown_fields(self):
        p = AthleteProfile(70, genotypes={"rs1": "2C"})
        assert AthleteProfile.from_dict(p.to_dict()) == p
        with pytest.raises(ProfileError):
            AthleteProfile.from_dict({"mass_kg": 70, "weight": 3})


class TestCtl:
    def test_constant(self):
        loads = [DailyLoad(D0 + timedelta(days=i), 100.0) for i in range(60)]
        assert ctl(loads, D0 + timedelta(days=59)) == 100.0

    def test_single_day(self):
        assert ctl([DailyLoad(D0, 42.0)], D0 + timedelta(days=41)) == 1.0

    def test_empty(self):
        assert ctl([], D0) == 0.0

    def test_negative_load_rejected(self):
        with pytest.raises(ValueError):
            DailyLoad(D0, -1.0)

    @given(st.lists(st.floats(0, 500), min_size=1, max_size=60), st.integers(-400, 400), st.floats(0.1, 10))
    def test_translation_invariant_and_linear(self, vals, shift, k):
        loads = [DailyLoad(D0 + timedelta(days=i), v) for i, v in enumerate(vals)]
        end = D0 + timedelta(days=len(vals) - 1)
        base = ctl(loads, end)
        moved = [DailyLoad(l.date + timedelta(days=shift), l.value) for l in loads]
        assert ctl(moved, end + timedelta(days=shift)) == pytest.approx(base, abs=1e-9)
        scaled = [DailyLoad(l.date, l.value * k) for l in loads]
        assert ctl(scaled, end) == pytest.approx(k * base, rel=1e-9, abs=1e-9)

    def test_exponential_variant_converges_to_constant(self):
        loads = [DailyLoad(D0 + timedelta(days=i), 50.0) for i in range(1000)]
        assert ctl_exponential(loads, D0 + timedelta(days=999)) == pytest.approx(50.0, rel=1e-6)


class TestTrimp:
    def test_at_rest_is_zero(self, profile):
        assert trimp(series(np.full(600, profile.hr_rest)), profile) == 0.0

    def test_hour_at_max(self):
        p = AthleteProfile(70, hr_rest=50, hr_max=190)
        assert trimp(series(np.full(3600, 190.0)), p) == pytest.approx(60 * 0.64 * math.exp(1.92), rel=1e-12)
        assert 60 * 0.64 * math.exp(1.92) == pytest.approx(261.9, abs=0.05)

    def test_female_constants(self):
        p = AthleteProfile(70, sex="female", hr_rest=50, hr_max=190)
        assert trimp(series(np.full(60, 190.0)), p) == pytest.approx(0.86 * math.exp(1.67))

    def test_empty(self, profile):
        assert trimp(series([]), profile) == 0.0

    def test_bad_profile(self):
        with pytest.raises(ProfileError):
            trimp(series([100.0]), AthleteProfile(70, hr_rest=190, hr_max=190))

    @given(st.lists(st.floats(40, 200), min_size=1, max_size=200), st.data())
    def test_monotone_in_each_sample(self, vals, data):
        p = AthleteProfile(70, hr_rest=50, hr_max=190)
        i = data.draw(st.integers(0, len(vals) - 1))
        bumped = list(vals)
        bumped[i] += data.draw(st.floats(0, 50))
        assert trimp(series(bumped), p) >= trimp(series(vals), p) - 1e-12


class TestHpa:
    P60 = AthleteProfile(60)

    def test_burst_above(self):
        power = series([0] * 10 + [650] * 6 + [0] * 10)
        ev = hpa_events(power, self.P60)
        assert len(ev) == 1 and ev[0].duration == 6
        assert ev[0].attributes["peak_wpkg"] == pytest.approx(650 / 60)

    def test_below(self):
        assert hpa_events(series([599] * 60), self.P60) == []

    def test_two_bursts(self):
        power = series([650] * 6 + [0] * 60 + [650] * 6)
        assert len(hpa_events(power, self.P60)) == 2

    def test_bad_mass(self):
        with pytest.raises(ProfileError):
            hpa_events(series([1.0] * 10), AthleteProfile(0))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        vals = np.where(r.random(3000) < 0.03, r.uniform(500, 1000, 3000), r.uniform(0, 400, 3000)).round(0)
        s = series(vals, t0=77)
        got = [(e.start, e.end) for e in hpa_events(s, self.P60)]
        assert got == oracles.brute_hpa(s.t.tolist(), vals.tolist(), 60.0)


class TestGovss:
    def test_zero_speed(self, profile):
        z = series(np.zeros(100))
        assert govss(z, z, profile, 200.0) == 0.0

    def test_closed_form_hour(self):
        p = AthleteProfile(60)
        speed, slope = series(np.full(3600, 5.0)), series(np.full(3600, 0.05))
        gp = float(graded_power(np.array([5.0]), np.array([0.05]), 60)[0])
        assert gp == pytest.approx(161.865, abs=1e-9)
        assert govss(speed, slope, p, gp) == pytest.approx(100.0, rel=1e-12)

    def test_mass_doubling_quadruples(self, rng):
        speed = series(rng.uniform(3, 8, 600))
        slope = series(rng.uniform(0, 0.08, 600))
        a = govss(speed, slope, AthleteProfile(60), 250.0)
        b = govss(speed, slope, AthleteProfile(120), 250.0)
        assert b == pytest.approx(4 * a, rel=1e-9)

    def test_bad_cp60(self, profile):
        with pytest.raises(ValueError):
            govss(series([1.0]), series([0.0]), profile, 0.0)


class TestVamAndActiveTime:
    @pytest.mark.parametrize("rise, span, expected", [(300, 1800, 600), (0, 100, 0), (-120, 240, -1800)])
    def test_vam(self, rise, span, expected):
        alt = StreamSeries("alt", "m", [0, span], [100.0, 100.0 + rise])
        assert vam(alt, (0, span)) == expected

    def test_vam_needs_two_samples(self):
        with pytest.raises(NotComputable):
            vam(series([1.0]), (0, 10))

    @pytest.mark.parametrize("vals, n", [([0] * 50, 0), ([90] * 100, 100), ([0, 90] * 30, 30)])
    def test_active_time(self, vals, n):
        assert active_time(series(vals)) == n


class TestDecoupling:
    def test_identical_halves(self):
        assert aerobic_decoupling(series([200.0] * 200), series([140.0] * 200)) == 0.0

    def test_half_ratio(self):
        p = series([200.0] * 200)
        h = series([100.0] * 100 + [200.0] * 100)
        assert aerobic_decoupling(p, h) == pytest.approx(50.0, abs=1e-9)

    @pytest.mark.parametrize("second_hr, expected", [(167.5, 40.3), (100.9, 0.9)])
    def test_gating_fixtures(self, second_hr, expected):
        p = series([200.0] * 1200)
        h = series([100.0] * 600 + [second_hr] * 600)
        assert aerobic_decoupling(p, h) == pytest.approx(expected, abs=0.05)

    def test_missing_stream(self):
        with pytest.raises(NotComputable):
            aerobic_decoupling(None, series([1.0]))

    def test_zero_first_half_ratio(self):
        with pytest.raises(NotComputable):
            aerobic_decoupling(series([0.0] * 200), series([100.0] * 200))

    def test_too_few_samples(self):
        with pytest.raises(NotComputable):
            aerobic_decoupling(series([200.0] * 50), series([100.0] * 50))

    @given(st.lists(st.tuples(st.floats(50, 500), st.floats(60, 200)), min_size=120, max_size=300),
           st.floats(0.1, 100))
    def test_scale_invariant_and_matches_oracle(self, rows, k):
        p = [a for a, _ in rows]
        h = [b for _, b in rows]
        ad = aerobic_decoupling(series(p), series(h))
        assert ad == pytest.approx(oracles.brute_decoupling(p, h), abs=1e-9)
        assert aerobic_decoupling(series(np.array(p) * k), series(h)) == pytest.approx(ad, abs=1e-9)
        assert aerobic_decoupling(series(p), series(np.array(h) * k)) == pytest.approx(ad, abs=1e-9)


class TestCp:
    def test_constant(self):
        c = cp_curve([series([200.0] * 600)], durations=[1, 300, 600, 601, 3600])
        assert c.watts.tolist() == [200.0, 200.0, 200.0, 0.0, 0.0]

    def test_two_level(self):
        c = cp_curve([series([300.0] * 60 + [100.0] * 540)], durations=[60, 600])
        assert c.at(60) == 300.0
        assert c.at(600) == pytest.approx(120.0)

    def test_untrained_reference(self):
        c = cp_curve([series([2.0 * 70] * 1200)], durations=[1000])
        assert c.at(1000) / 70 == pytest.approx(2.0)

    def test_lookback_filters_old_activities(self):
        old = series([500.0] * 10, t0=0)
        new = series([100.0] * 10, t0=50 * 86400)
        c = cp_curve([old, new], durations=[5], lookback_days=42, as_of=50 * 86400 + 100)
        assert c.at(5) == 100.0

    def test_longer_window_can_beat_requested_duration(self):
        # the 3 s window (mean 20/3) beats every 2 s window (mean 5)
        assert cp_curve([series([10.0, 0.0, 10.0])], durations=[2]).at(2) == pytest.approx(20 / 3)

    def test_cache_reuses_and_matches(self):
        acts = [series([300.0] * 60 + [100.0] * 540), series([250.0] * 100, t0=5000)]
        cache = {}
        first = cp_curve(acts, durations=[5, 60, 600], cache=cache)
        assert len(cache) == 2
        again = cp_curve(acts, durations=[5, 60, 600], cache=cache)
        plain = cp_curve(acts, durations=[5, 60, 600])
        assert first.watts.tolist() == again.watts.tolist() == plain.watts.tolist()

    def test_gaps_count_as_zero(self):
        s = StreamSeries("p", "W", [0, 2], [100.0, 100.0])
        assert cp_curve([s], durations=[3]).at(3) == pytest.approx(200 / 3)

    def test_bad_duration(self):
        with pytest.raises(ValueError):
            cp_curve([], durations=[0])

    def test_missing_duration_lookup(self):
        with pytest.raises(KeyError):
            CpCurve([1, 5], [2.0, 1.0]).at(3)

    def test_csv(self):
        assert CpCurve([1], [2.5]).to_csv() == "duration_s,watts\n1,2.5\n"

    @given(st.lists(st.lists(st.floats(0, 1500), min_size=1, max_size=40), min_size=1, max_size=3))
    def test_monotone_and_exhaustive(self, acts):
        streams = [series(a) for a in acts]
        longest = max(len(a) for a in acts)
        c = cp_curve(streams, durations=range(1, longest + 3))
        assert np.all(np.diff(c.watts) <= 0)
        for d, w in zip(c.durations.tolist(), c.watts.tolist()):
            want = max((oracles.brute_mean_max(a, k) or 0.0 for a in acts for k in range(d, len(a) + 1)),
                       default=0.0)
            assert w == pytest.approx(want, abs=1e-9)

    def test_mean_max_power(self):
        assert mean_max_power(np.array([1.0, 3.0, 2.0])).tolist() == [3.0, 2.5, 2.0]

    def test_log_grid(self):
        g = log_grid()
        assert g[0] == 1 and g[-1] == 18000 and np.all(np.diff(g) > 0)


class TestExposure:
    def test_rest_fixture(self):
        p = AthleteProfile(58, hr_rest=48, age_years=30)
        t = np.arange(10) * 60
        ex = pollutant_intake(StreamSeries("hr", "bpm", t, np.full(10, 48.0)),
                              StreamSeries("pm25", "ug/m3", t, np.full(10, 10.0)), p)
        assert ex.breathing_rate[0] == 12.0
        assert ex.tidal_volume_l[0] == pytest.approx(0.406)
        assert ex.intake_ug[0] == pytest.approx(0.04872)
        assert ex.events == []

    def test_above_threshold_event(self):
        p = AthleteProfile(58, hr_rest=48, age_years=30)
        conc = 0.71 / (12 * 0.406 * 0.001)
        t = np.arange(3) * 60
        ex = pollutant_intake(StreamSeries("hr", "bpm", t, np.full(3, 48.0)),
                              StreamSeries("pm25", "ug/m3", t, np.array([0.0, conc, 0.0])), p)
        assert ex.intake_ug[1] == pytest.approx(0.71)
        assert [(e.start, e.end) for e in ex.events] == [(60, 120)]

    def test_zero_concentration(self, profile):
        t = np.arange(5) * 60
        ex = pollutant_intake(StreamSeries("hr", "bpm", t, np.full(5, 150.0)),
                              StreamSeries("pm25", "ug/m3", t, np.zeros(5)), profile)
        assert ex.total_ug == 0 and ex.events == []

    def test_negative_concentration(self, profile):
        with pytest.raises(ValueError):
            pollutant_intake(series([100.0]), series([-1.0]), profile)

    @given(st.lists(st.tuples(st.floats(40, 200), st.floats(0, 500)), min_size=1, max_size=30),
           st.floats(0, 20))
    def test_linear_in_concentration_and_brute_events(self, rows, k):
        p = AthleteProfile(58, hr_rest=48, age_years=30)
        t = np.arange(len(rows)) * 60
        hr = StreamSeries("hr", "bpm", t, [a for a, _ in rows])
        conc = np.array([b for _, b in rows])
        base = pollutant_intake(hr, StreamSeries("pm25", "u", t, conc), p)
        scaled = pollutant_intake(hr, StreamSeries("pm25", "u", t, conc * k), p)
        assert scaled.total_ug == pytest.approx(k * base.total_ug, rel=1e-9, abs=1e-9)
        want = [(int(t[i]), int(t[j - 1]) + 60) for i, j in oracles.brute_runs(v > 0.7 for v in base.intake_ug)]
        assert [(e.start, e.end) for e in base.events] == want

    def test_minute_means(self):
        s = StreamSeries("hr", "bpm", [0, 30, 60, 61], [1.0, 3.0, 5.0, 7.0])
        m = minute_means(s)
        assert m.t.tolist() == [0, 60] and m.values.tolist() == [2.0, 6.0]


class TestSpo2:
    def test_all_normal(self):
        assert spo2_events(series([98.0] * 30)) == []

    def test_ten_minutes_low(self):
        ev = spo2_events(series([94.0] * 600))
        assert len(ev) == 1 and ev[0].attributes["min"] == 94.0

    def test_dips_split(self):
        assert len(spo2_events(series([94.0, 96.0, 93.0]))) == 2

    def test_range(self):
        with pytest.raises(ValueError):
            spo2_events(series([101.0]))

    @given(st.lists(st.floats(85, 100), max_size=300))
    def test_brute_force(self, vals):
        s = series(vals)
        got = [(e.start, e.end) for e in spo2_events(s)]
        assert got == [(i, j - 1) for i, j in oracles.brute_runs(v < 95 for v in vals)]


class TestScores:
    def test_perfect_sleep(self):
        assert sleep_score(8, 0, 100, 10) == pytest.approx(100.0)

    def test_zero_sleep(self):
        # movement 1 zeroes the movement term too
        assert sleep_score(0, 1, 0, 0) == 0.0

    def test_worked_example(self):
        assert sleep_score(6, 0.5, 50, 5) == pytest.approx(60.0)

    def test_stress(self):
        assert stress_score(100, 0) == 0.0
        assert stress_score(0, 10) == 100.0

    @pytest.mark.parametrize("args", [(25, 0, 0, 0), (8, 1.5, 0, 0), (8, 0, -1, 0), (8, 0, 0, 11)])
    def test_range_errors(self, args):
        with pytest.raises(ValueError):
            sleep_score(*args)

    def test_csv(self):
        assert metrics_csv([(D0, "ctl", 1.5)]) == "date,metric,value\n2024-01-01,ctl,1.5\n"
