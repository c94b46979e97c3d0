import math
import tempfile
import tracemalloc
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pallex import energy
from pallex.energy import (
    T_975,
    Z_975,
    DigitalTrace,
    LifetimeParams,
    PowerTrace,
    detect_marker,
    encode_marker,
    forced_forced_bounds,
    format_segment_csv,
    integrate_power,
    integrate_power_csv,
    lifetime,
    lifetime_curve,
    lifetime_improvement,
    measure_until_marker,
    params_from_phase_row,
    phase_table,
    read_digital_csv,
    read_power_csv,
    segment_phases,
    summarize_runs,
    synthesize_power,
    timeline_energy,
)
from pallex.errors import LifetimeError, TraceError
from pallex.graph import AppManifest, StageSpec
from pallex.sim import BootPhases, StageProfile, UnitProfile, load_unit_profiles, simulate_boot

FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"
MS = 1000


@st.composite
def simulated_timelines(draw):
    demands = st.sampled_from((0.0, 0.25, 0.5, 1.0))
    units = []
    for i in range(draw(st.integers(0, 4))):
        deps = draw(st.sets(st.integers(0, i - 1), max_size=i)) if i else set()
        units.append(
            UnitProfile(
                f"u{i}.service",
                draw(st.integers(0, 50)),
                frozenset(f"u{d}.service" for d in deps),
                draw(demands),
                draw(st.booleans()),
            )
        )
    stages = []
    profiles = {}
    for i in range(draw(st.integers(0, 4))):
        deps = draw(st.sets(st.integers(0, i - 1), max_size=i)) if i else set()
        unit_deps = draw(st.sets(st.sampled_from([u.unit_name for u in units]), max_size=2)) if units else set()
        stages.append(StageSpec(f"s{i}", f"/bin/s{i}", frozenset(f"s{d}" for d in deps), frozenset(unit_deps)))
        profiles[f"s{i}"] = StageProfile(draw(st.integers(0, 50)), draw(demands))
    phases = BootPhases(draw(st.integers(1, 20)), draw(st.integers(0, 20)), draw(st.integers(0, 30)))
    cores = draw(st.sampled_from((1, 2, 4, None)))
    return simulate_boot(tuple(units), AppManifest("rand", tuple(stages)), profiles, phases, cores=cores)


def constant_trace(power_mw: float, seconds: float) -> PowerTrace:
    ts = np.arange(0, int(seconds * 1_000_000) + 1, MS)
    return PowerTrace(ts, np.full(ts.size, power_mw))


def two_level_trace() -> PowerTrace:
    # boot at 693.85 mW for 6.5 s, then userspace init at 5.77 J over 2.94 s
    ts = np.arange(0, 9_440_000 + 1, MS)
    p = np.where(ts < 6_500_000, 693.85, 5770 / 2.94)
    return PowerTrace(ts, p)


class IntegrationTests(unittest.TestCase):
    def test_constant_power(self):
        self.assertAlmostEqual(integrate_power(constant_trace(1000, 10)), 10.0, places=9)

    def test_boot_phase_energy(self):
        self.assertAlmostEqual(integrate_power(constant_trace(693.85, 6.5)), 4.51, places=2)

    def test_linear_ramp(self):
        ts = np.arange(0, 10_000_001, MS)
        p = 2000 * ts / 10_000_000
        energy = integrate_power(PowerTrace(ts, p))
        self.assertLess(abs(energy - 10.0) / 10.0, 0.001)

    def test_window(self):
        t = constant_trace(1000, 10)
        self.assertAlmostEqual(integrate_power(t, (2_000_000, 5_000_000)), 3.0, places=9)
        self.assertEqual(integrate_power(t, (3_000_000, 3_000_000)), 0.0)
        with self.assertRaises(TraceError):
            integrate_power(t, (5_000_000, 2_000_000))
        with self.assertRaises(TraceError):
            integrate_power(t, (0, 11_000_000))

    def test_single_sample_is_zero(self):
        self.assertEqual(integrate_power(PowerTrace(np.array([5]), np.array([100.0]))), 0.0)

    def test_trace_validation(self):
        with self.assertRaises(TraceError):
            PowerTrace(np.array([0, 10, 10]), np.array([1.0, 1.0, 1.0]))
        with self.assertRaises(TraceError):
            PowerTrace(np.array([0, 10]), np.array([1.0, -1.0]))
        with self.assertRaises(TraceError):
            PowerTrace(np.array([0, 10]), np.array([1.0]))
        with self.assertRaises(TraceError):
            integrate_power(PowerTrace(np.array([], dtype=np.int64), np.array([])))

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(min_value=0, max_value=5000, allow_nan=False), min_size=2, max_size=50),
        st.floats(min_value=0, max_value=10, allow_nan=False),
    )
    def test_linear_in_power(self, powers, factor):
        ts = np.arange(len(powers)) * 250
        t = PowerTrace(ts, np.array(powers))
        self.assertAlmostEqual(
            integrate_power(t.scaled(factor)), factor * integrate_power(t), places=9
        )

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(min_value=0, max_value=5000, allow_nan=False), min_size=2, max_size=50),
        st.data(),
    )
    def test_windows_add_up(self, powers, data):
        ts = np.arange(len(powers)) * 250
        t = PowerTrace(ts, np.array(powers))
        end = int(ts[-1])
        a, b, c = sorted(data.draw(st.lists(st.integers(0, end), min_size=3, max_size=3)))
        whole = integrate_power(t, (a, c))
        self.assertAlmostEqual(whole, integrate_power(t, (a, b)) + integrate_power(t, (b, c)), places=9)


class SegmentTests(unittest.TestCase):
    def test_constant_split(self):
        segments = segment_phases(constant_trace(1000, 10), [4_000_000])
        self.assertEqual([(s.start_us, s.end_us) for s in segments], [(0, 4_000_000), (4_000_000, 10_000_000)])
        self.assertAlmostEqual(segments[0].energy_j, 4.0, places=9)
        self.assertAlmostEqual(segments[1].energy_j, 6.0, places=9)
        self.assertEqual(
            format_segment_csv(segments),
            "segment,start_us,end_us,energy_j\n0,0,4000000,4.000\n1,4000000,10000000,6.000\n",
        )

    def test_boot_and_userspace(self):
        boot, usi = segment_phases(two_level_trace(), [6_500_000])
        self.assertLess(abs(boot.energy_j - 4.51) / 4.51, 0.005)
        self.assertLess(abs(usi.energy_j - 5.77) / 5.77, 0.005)

    def test_no_boundaries(self):
        segments = segment_phases(constant_trace(1000, 2), [])
        self.assertEqual(len(segments), 1)
        self.assertAlmostEqual(segments[0].energy_j, 2.0, places=9)

    def test_bad_boundaries(self):
        t = constant_trace(1000, 10)
        with self.assertRaises(TraceError):
            segment_phases(t, [5_000_000, 3_000_000])
        with self.assertRaises(TraceError):
            segment_phases(t, [12_000_000])


class MarkerTests(unittest.TestCase):
    def test_clean_marker(self):
        d = encode_marker("10101100", 10 * MS, 2_000_000, sample_rate_hz=1000)
        self.assertEqual(detect_marker(d, "10101100", 10 * MS), 2_000_000)

    def test_single_step_never_matches(self):
        ts = np.arange(0, 1_000_001, MS)
        d = DigitalTrace(ts, (ts >= 500_000).astype(np.int8), 1000)
        self.assertIsNone(detect_marker(d, "10101100", 10 * MS))

    def test_constant_never_matches(self):
        ts = np.arange(0, 1_000_001, MS)
        d = DigitalTrace(ts, np.zeros(ts.size, dtype=np.int8), 1000)
        self.assertIsNone(detect_marker(d, "10101100", 10 * MS))

    def test_empty_trace(self):
        d = DigitalTrace(np.array([], dtype=np.int64), np.array([], dtype=np.int8), 1000)
        self.assertIsNone(detect_marker(d, "10101100", 10 * MS))

    def test_bit_period_too_short(self):
        d = encode_marker("10", 10 * MS, 0)
        with self.assertRaises(ValueError):
            detect_marker(d, "10", 1 * MS)

    def test_bad_pattern(self):
        with self.assertRaises(ValueError):
            encode_marker("1", 10 * MS, 0)
        with self.assertRaises(ValueError):
            encode_marker("10x", 10 * MS, 0)

    def test_run_spanning_many_blocks(self):
        d = encode_marker("10101100", 10 * MS, 2_000_000, sample_rate_hz=1000)
        for chunk in (1, 7, 64, 4096):
            with mock.patch.object(energy, "MARKER_CHUNK", chunk):
                self.assertEqual(detect_marker(d, "10101100", 10 * MS), 2_000_000)

    def test_earliest_of_two_markers(self):
        first = encode_marker("10101100", 10 * MS, 1_000_000, tail_us=500_000)
        levels = first.levels.copy()
        ts = first.timestamps_us
        second_start = 1_300_000
        inside = (ts >= second_start) & (ts < second_start + 80 * MS)
        pattern = np.array([1, 0, 1, 0, 1, 1, 0, 0], dtype=np.int8)
        levels[inside] = pattern[(ts[inside] - second_start) // (10 * MS)]
        d = DigitalTrace(ts, levels, 1000)
        with mock.patch.object(energy, "MARKER_CHUNK", 100):
            self.assertEqual(detect_marker(d, "10101100", 10 * MS), 1_000_000)

    def test_long_trace_memory_stays_bounded(self):
        # ten minutes at 1 ksps with the marker near the end
        d = encode_marker("10101100", 10 * MS, 599_000_000, sample_rate_hz=1000)
        self.assertGreater(len(d), 599_000)
        tracemalloc.start()
        try:
            found = detect_marker(d, "10101100", 10 * MS)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        self.assertEqual(found, 599_000_000)
        self.assertLess(peak, 4 * d.timestamps_us.nbytes)

    def test_measure_until_marker(self):
        power = constant_trace(1000, 3)
        digital = encode_marker("10101100", 10 * MS, 2_000_000)
        energy, marker = measure_until_marker(power, digital, "10101100", 10 * MS)
        self.assertEqual(marker, 2_000_000)
        self.assertAlmostEqual(energy, 2.0, places=9)

    def test_missing_marker_is_an_error(self):
        ts = np.arange(0, 1_000_001, MS)
        digital = DigitalTrace(ts, np.zeros(ts.size, dtype=np.int8), 1000)
        with self.assertRaises(TraceError):
            measure_until_marker(constant_trace(1000, 1), digital, "10101100", 10 * MS)

    def test_marker_after_power_trace(self):
        digital = encode_marker("10101100", 10 * MS, 2_000_000)
        with self.assertRaises(TraceError):
            measure_until_marker(constant_trace(1000, 1), digital, "10101100", 10 * MS)


class CsvTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_power_columns(self):
        path = self.write("p.csv", "timestamp_us,power_mw\n0,1000\n1000,1000\n2000,500\n")
        t = read_power_csv(path)
        self.assertEqual(t.timestamps_us.tolist(), [0, 1000, 2000])
        self.assertAlmostEqual(integrate_power(t), 2e-3, places=12)

    def test_voltage_current_columns(self):
        path = self.write("vi.csv", "timestamp_us,voltage_mv,current_ua\n0,5000,200000\n1000,5000,200000\n")
        self.assertEqual(read_power_csv(path).power_mw.tolist(), [1000.0, 1000.0])

    def test_quantization(self):
        path = self.write("vi.csv", "timestamp_us,voltage_mv,current_ua\n0,5001,200049\n1000,5001,200049\n")
        self.assertEqual(read_power_csv(path, quantize=True).power_mw.tolist(), [1000.0, 1000.0])
        self.assertGreater(read_power_csv(path).power_mw[0], 1000.0)

    def test_missing_columns(self):
        path = self.write("bad.csv", "time,watts\n0,1\n")
        with self.assertRaises(TraceError):
            read_power_csv(path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            read_power_csv(self.dir / "nope.csv")

    def test_streaming_matches_in_memory(self):
        rows = "".join(f"{i * 250},{(i * 37) % 1900}\n" for i in range(101))
        path = self.write("s.csv", "timestamp_us,power_mw\n" + rows)
        t = read_power_csv(path)
        self.assertAlmostEqual(integrate_power_csv(path, chunksize=7), integrate_power(t), places=12)
        window = (1_100, 20_300)
        self.assertAlmostEqual(
            integrate_power_csv(path, window=window, chunksize=7),
            integrate_power(t, window),
            places=12,
        )
        with self.assertRaises(TraceError):
            integrate_power_csv(path, window=(0, 50_000), chunksize=7)

    def test_streaming_rejects_unordered_rows(self):
        path = self.write("u.csv", "timestamp_us,power_mw\n0,1\n1000,1\n500,1\n")
        with self.assertRaises(TraceError):
            integrate_power_csv(path, chunksize=2)

    def test_digital_rate_inference(self):
        path = self.write("d.csv", "timestamp_us,level\n0,0\n1000,1\n2000,0\n3000,1\n")
        d = read_digital_csv(path)
        self.assertEqual(d.sample_rate_hz, 1000.0)
        self.assertEqual(d.levels.tolist(), [0, 1, 0, 1])

    def test_digital_levels_must_be_binary(self):
        path = self.write("d.csv", "timestamp_us,level\n0,0\n1000,2\n")
        with self.assertRaises(TraceError):
            read_digital_csv(path)


class SynthesisTests(unittest.TestCase):
    def test_constant_core(self):
        t = simulate_boot((), AppManifest("none"), {}, BootPhases(1000, 1000, 0), cores=1)
        trace = synthesize_power(t, 500, 500, 1000)
        self.assertTrue(np.all(trace.power_mw == 1000))
        self.assertAlmostEqual(integrate_power(trace), 2.0, places=9)
        self.assertAlmostEqual(timeline_energy(t, 500, 500), 2.0, places=9)

    def test_closed_form_matches_sampling(self):
        for name in ("blame.json", "fig8-units.json"):
            units = load_unit_profiles(FIXTURES / name)
            t = simulate_boot(units, AppManifest("none"), {}, BootPhases(3650, 2850, 750), cores=2)
            for p_core in (0, 400, 1700):
                self.assertAlmostEqual(
                    integrate_power(synthesize_power(t, 300, p_core, 1000)),
                    timeline_energy(t, 300, p_core),
                    places=9,
                )

    @settings(max_examples=200, deadline=None)
    @given(simulated_timelines(), st.integers(0, 2000), st.integers(0, 2000))
    def test_closed_form_matches_sampling_on_random_timelines(self, t, p_base, p_core):
        self.assertAlmostEqual(
            integrate_power(synthesize_power(t, p_base, p_core, 1000)),
            timeline_energy(t, p_base, p_core),
            places=9,
        )

    def test_linear_in_core_power(self):
        units = load_unit_profiles(FIXTURES / "blame.json")
        t = simulate_boot(units, AppManifest("none"), {}, BootPhases(100, 100, 0), cores=1)
        e0, e1, e2 = (integrate_power(synthesize_power(t, 300, c, 1000)) for c in (0, 500, 1000))
        self.assertAlmostEqual(e2 - e1, e1 - e0, places=9)

    def test_empty_timeline(self):
        t = simulate_boot((), AppManifest("none"), {}, BootPhases(0, 0, 0), cores=1)
        with self.assertRaises(TraceError):
            synthesize_power(t, 300, 500, 1000)


class StatisticsTests(unittest.TestCase):
    def test_small_sample_uses_t(self):
        mean, half = summarize_runs([1.0, 2.0, 3.0])
        self.assertEqual(mean, 2.0)
        self.assertAlmostEqual(half, T_975[2] / math.sqrt(3))

    def test_large_sample_uses_z(self):
        values = [float(i % 2) for i in range(40)]
        mean, half = summarize_runs(values)
        self.assertEqual(mean, 0.5)
        self.assertAlmostEqual(half, Z_975 * float(np.std(values, ddof=1)) / math.sqrt(40))

    def test_single_and_empty(self):
        self.assertEqual(summarize_runs([4.2]), (4.2, 0.0))
        with self.assertRaises(ValueError):
            summarize_runs([])


def params(**overrides) -> LifetimeParams:
    values = dict(battery_mah=2400, battery_v=5, e_btl=12, e_knl=0, e_user=0, e_sdn=0, cycles_per_hour=6)
    values.update(overrides)
    return LifetimeParams(**values)


class LifetimeTests(unittest.TestCase):
    def test_basic(self):
        self.assertAlmostEqual(lifetime(params()), 600.0)

    def test_from_phase_table(self):
        row = phase_table("rpi3", "EU", "slow", "5")
        self.assertEqual((row.e_btl_knl_j, row.e_usi_j), (4.51, 5.77))
        p = params_from_phase_row(row, 2400, 5, e_sdn=0.7, cycles_per_hour=10)
        self.assertAlmostEqual(p.e_cycle, 10.98)
        self.assertAlmostEqual(lifetime(p), 393.44, places=2)

    def test_identity(self):
        for n in (1, 6, 60):
            p = params(e_btl=4.5, e_user=5.8, e_sdn=0.4, cycles_per_hour=n)
            self.assertAlmostEqual(lifetime(p) * p.e_cycle * n, p.e_bat)

    def test_curve_and_improvement(self):
        curve = lifetime_curve(params(), [1, 2, 6])
        self.assertEqual([n for n, _ in curve], [1, 2, 6])
        self.assertAlmostEqual(curve[0][1], 3600.0)
        self.assertAlmostEqual(curve[2][1], 600.0)
        self.assertAlmostEqual(lifetime_improvement(600, 750), 25.0)
        with self.assertRaises(LifetimeError):
            lifetime_improvement(0, 10)

    def test_invalid_inputs(self):
        for bad in (
            params(battery_mah=0),
            params(battery_v=-1),
            params(e_btl=0),
            params(e_sdn=-0.1),
            params(cycles_per_hour=0),
        ):
            with self.assertRaises(LifetimeError):
                lifetime(bad)

    def test_phase_table_lookup(self):
        self.assertEqual(forced_forced_bounds("rpi3"), (0.2, 0.7))
        self.assertEqual(forced_forced_bounds("rpizw"), (0.4, 0.35))
        with self.assertRaises(LifetimeError):
            phase_table("rpi4", "EU", "slow", "5")
        with self.assertRaises(LifetimeError):
            forced_forced_bounds("rpi4")
