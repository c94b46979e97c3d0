"""
Power traces: CSV ingestion, left-Riemann integration, bit-pattern marker
detection, phase segmentation, synthesis from simulated timelines and the
battery lifetime model.

Units: timestamps in µs, power in mW, energy in J (mW·µs = 1e-9 J).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from pallex.errors import LifetimeError, TraceError
from pallex.sim import Timeline

PHASE_TABLE_FILE = Path(__file__).resolve().parent / "data" / "phase-table.json"

MW_US_TO_J = 1e-9
VOLTAGE_STEP_MV = 4.0
CURRENT_STEP_UA = 100.0
SEGMENT_HEADER = "segment,start_us,end_us,energy_j"
POWER_HEADER = "timestamp_us,power_mw"

# two-sided 97.5% quantiles of Student's t, by degrees of freedom
T_975 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
    8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145,
    15: 2.131, 16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086, 21: 2.080,
    22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060, 26: 2.056, 27: 2.052, 28: 2.048,
}
Z_975 = 1.96
MARKER_CHUNK = 65_536


# =====================
# Types
# =====================


def _check_timestamps(ts: np.ndarray, what: str):
    if ts.ndim != 1:
        raise TraceError(f"{what}: timestamps must be one-dimensional")
    if ts.size > 1 and not np.all(np.diff(ts) > 0):
        bad = int(np.argmax(np.diff(ts) <= 0)) + 1
        raise TraceError(f"{what}: timestamps not strictly increasing at sample {bad}")


@dataclass(frozen=True, eq=False)
class PowerTrace:
    timestamps_us: np.ndarray
    power_mw: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps_us, dtype=np.int64)
        p = np.asarray(self.power_mw, dtype=np.float64)
        if ts.shape != p.shape:
            raise TraceError("power trace: timestamp and power columns differ in length")
        _check_timestamps(ts, "power trace")
        if p.size and (np.any(p < 0) or not np.all(np.isfinite(p))):
            raise TraceError("power trace: power must be finite and >= 0")
        object.__setattr__(self, "timestamps_us", ts)
        object.__setattr__(self, "power_mw", p)

    def __len__(self) -> int:
        return int(self.timestamps_us.size)

    @property
    def span_us(self) -> tuple[int, int]:
        if not len(self):
            raise TraceError("power trace is empty")
        return int(self.timestamps_us[0]), int(self.timestamps_us[-1])

    def scaled(self, factor: float) -> "PowerTrace":
        return PowerTrace(self.timestamps_us, self.power_mw * factor)


@dataclass(frozen=True, eq=False)
class DigitalTrace:
    timestamps_us: np.ndarray
    levels: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps_us, dtype=np.int64)
        levels = np.asarray(self.levels, dtype=np.int8)
        if ts.shape != levels.shape:
            raise TraceError("digital trace: timestamp and level columns differ in length")
        _check_timestamps(ts, "digital trace")
        if levels.size and not np.isin(levels, (0, 1)).all():
            raise TraceError("digital trace: levels must be 0 or 1")
        if self.sample_rate_hz <= 0:
            raise TraceError("digital trace: sample rate must be > 0")
        object.__setattr__(self, "timestamps_us", ts)
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return int(self.timestamps_us.size)


@dataclass(frozen=True)
class Segment:
    index: int
    start_us: int
    end_us: int
    energy_j: float


@dataclass(frozen=True)
class LifetimeParams:
    battery_mah: float
    battery_v: float
    e_btl: float
    e_knl: float
    e_user: float
    e_sdn: float
    cycles_per_hour: float

    @property
    def e_cycle(self) -> float:
        return self.e_btl + self.e_knl + self.e_user + self.e_sdn

    @property
    def e_bat(self) -> float:
        return 3600 * (self.battery_mah / 1000) * self.battery_v


@dataclass(frozen=True)
class PhaseRow:
    t_btl_knl_s: float
    e_btl_knl_j: float
    t_usi_s: float
    e_usi_j: float
    t_total_s: float
    e_total_j: float


# =====================
# Ingestion
# =====================


def _power_columns(df: pd.DataFrame, quantize: bool, where: str) -> tuple[np.ndarray, np.ndarray]:
    cols = set(df.columns)
    if "timestamp_us" not in cols:
        raise TraceError(f"{where}: missing column timestamp_us")
    ts = df["timestamp_us"].to_numpy(dtype=np.int64)
    if "power_mw" in cols:
        if quantize:
            logging.debug("%s: quantization applies to voltage/current traces only", where)
        return ts, df["power_mw"].to_numpy(dtype=np.float64)
    if {"voltage_mv", "current_ua"} <= cols:
        v = df["voltage_mv"].to_numpy(dtype=np.float64)
        i = df["current_ua"].to_numpy(dtype=np.float64)
        if quantize:
            v = np.round(v / VOLTAGE_STEP_MV) * VOLTAGE_STEP_MV
            i = np.round(i / CURRENT_STEP_UA) * CURRENT_STEP_UA
        # mV * µA = nW
        return ts, v * i * 1e-6
    raise TraceError(
        f"{where}: expected columns timestamp_us,power_mw or timestamp_us,voltage_mv,current_ua"
    )


def read_power_csv(path: Path, quantize: bool = False) -> PowerTrace:
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"Power trace not found: {path}")
    df = pd.read_csv(path)
    ts, p = _power_columns(df, quantize, str(path))
    logging.info("loaded %d power samples from %s", ts.size, path)
    return PowerTrace(ts, p)


def read_digital_csv(path: Path, sample_rate_hz: float | None = None) -> DigitalTrace:
    """
    Without an explicit rate, it is taken from the median sample spacing.
    """
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"Digital trace not found: {path}")
    df = pd.read_csv(path)
    if not {"timestamp_us", "level"} <= set(df.columns):
        raise TraceError(f"{path}: expected columns timestamp_us,level")
    ts = df["timestamp_us"].to_numpy(dtype=np.int64)
    if sample_rate_hz is None:
        if ts.size < 2:
            raise TraceError(f"{path}: need two samples to infer the sample rate")
        sample_rate_hz = 1e6 / float(np.median(np.diff(ts)))
    return DigitalTrace(ts, df["level"].to_numpy(), sample_rate_hz)


def format_power_csv(t: PowerTrace) -> str:
    lines = [POWER_HEADER]
    lines += [f"{ts},{p:.3f}" for ts, p in zip(t.timestamps_us.tolist(), t.power_mw.tolist())]
    return "\n".join(lines) + "\n"


# =====================
# Integration
# =====================


def _check_window(window: tuple[int, int] | None, span: tuple[int, int]) -> tuple[int, int]:
    if window is None:
        return span
    lo, hi = window
    if hi < lo:
        raise TraceError(f"inverted window [{lo}, {hi}]")
    if lo < span[0] or hi > span[1]:
        raise TraceError(f"window [{lo}, {hi}] outside trace span [{span[0]}, {span[1]}]")
    return lo, hi


def _left_riemann(ts: np.ndarray, p: np.ndarray, lo: float, hi: float) -> float:
    # each sample holds until the next one; the last sample closes the trace
    edges = np.clip(ts, lo, hi)
    return float(np.dot(p[:-1], np.diff(edges))) * MW_US_TO_J


def integrate_power(t: PowerTrace, window: tuple[int, int] | None = None) -> float:
    lo, hi = _check_window(window, t.span_us)
    return _left_riemann(t.timestamps_us, t.power_mw, lo, hi)


def integrate_power_csv(
    path: Path,
    window: tuple[int, int] | None = None,
    quantize: bool = False,
    chunksize: int = 100_000,
) -> float:
    """
    Same result as integrate_power(read_power_csv(path)), in one streaming
    pass with memory bounded by chunksize.
    """
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"Power trace not found: {path}")
    if window is not None and window[1] < window[0]:
        raise TraceError(f"inverted window [{window[0]}, {window[1]}]")
    lo, hi = window if window is not None else (-math.inf, math.inf)

    energy = 0.0
    first = None
    carry: tuple[int, float] | None = None
    for chunk in pd.read_csv(path, chunksize=chunksize):
        ts, p = _power_columns(chunk, quantize, str(path))
        if not ts.size:
            continue
        if carry is not None:
            ts = np.concatenate(([carry[0]], ts))
            p = np.concatenate(([carry[1]], p))
        PowerTrace(ts, p)
        if first is None:
            first = int(ts[0])
        energy += _left_riemann(ts, p, lo, hi)
        carry = (int(ts[-1]), float(p[-1]))

    if carry is None:
        raise TraceError(f"{path}: power trace is empty")
    if window is not None:
        _check_window(window, (first, carry[0]))
    return energy


def segment_phases(t: PowerTrace, boundaries: Sequence[int]) -> list[Segment]:
    """
    Splits the trace at the boundaries: [start, b1], [b1, b2], ..., [bn, end].
    """
    start, end = t.span_us
    points = [int(b) for b in boundaries]
    for a, b in zip(points, points[1:]):
        if b <= a:
            raise TraceError("segment boundaries must be strictly increasing")
    for b in points:
        if b < start or b > end:
            raise TraceError(f"boundary {b} outside trace span [{start}, {end}]")
    edges = [start] + points + [end]
    return [
        Segment(idx, lo, hi, integrate_power(t, (lo, hi)))
        for idx, (lo, hi) in enumerate(zip(edges, edges[1:]))
    ]


def format_segment_csv(segments: Iterable[Segment]) -> str:
    lines = [SEGMENT_HEADER]
    lines += [f"{s.index},{s.start_us},{s.end_us},{s.energy_j:.3f}" for s in segments]
    return "\n".join(lines) + "\n"


# =====================
# Marker detection
# =====================


def _parse_pattern(pattern: str) -> np.ndarray:
    if len(pattern) < 2 or set(pattern) - {"0", "1"}:
        raise ValueError(f"pattern must be at least two bits of 0/1, got {pattern!r}")
    return np.array([int(c) for c in pattern], dtype=np.int8)


def encode_marker(
    pattern: str,
    bit_period_us: int,
    start_us: int,
    sample_rate_hz: float = 1000.0,
    idle_level: int = 0,
    tail_us: int | None = None,
) -> DigitalTrace:
    """
    Digital trace as a minion would emit it: idle level, then the pattern
    one bit per bit_period_us from start_us, then idle again.
    """
    bits = _parse_pattern(pattern)
    step = int(round(1e6 / sample_rate_hz))
    if step < 1:
        raise ValueError("sample rate above 1 MHz is not representable in µs")
    end_pattern = start_us + bits.size * bit_period_us
    tail = bit_period_us * 2 if tail_us is None else tail_us
    ts = np.arange(0, end_pattern + tail + 1, step, dtype=np.int64)
    levels = np.full(ts.size, idle_level, dtype=np.int8)
    inside = (ts >= start_us) & (ts < end_pattern)
    levels[inside] = bits[(ts[inside] - start_us) // bit_period_us]
    return DigitalTrace(ts, levels, sample_rate_hz)


def _marker_window_matches(
    ts: np.ndarray,
    cum: np.ndarray,
    bits: np.ndarray,
    bit_period_us: int,
    limit: float,
    lo: int,
    hi: int,
) -> np.ndarray:
    """Match mask for the candidate starts ts[lo:hi], built one bit at a time."""
    starts = ts[lo:hi]
    match = starts + bits.size * bit_period_us <= limit
    left = np.searchsorted(ts, starts, side="left")
    for k, bit in enumerate(bits):
        right = np.searchsorted(ts, starts + (k + 1) * bit_period_us, side="left")
        counts = right - left
        ones = cum[right] - cum[left]
        # empty windows and majority ties fail both comparisons
        if bit:
            match &= 2 * ones > counts
        else:
            match &= 2 * ones < counts
        left = right
    return match


def detect_marker(d: DigitalTrace, pattern: str, bit_period_us: int) -> int | None:
    """
    Tries every sample as the start of the first bit and decodes each
    bit_period_us window by majority vote (ties never match). Candidates
    that decode to the pattern come in runs around the true start; the
    centre of the earliest run is returned, or None.

    Candidates are scanned in blocks of MARKER_CHUNK samples, so working
    memory does not grow with the trace length or the pattern length.
    """
    bits = _parse_pattern(pattern)
    if not len(d):
        return None
    interval = 1e6 / d.sample_rate_hz
    if bit_period_us < 2 * interval:
        raise ValueError("bit period must span at least two sample intervals")

    ts = d.timestamps_us
    cum = np.zeros(ts.size + 1, dtype=np.int64)
    np.cumsum(d.levels, dtype=np.int64, out=cum[1:])
    limit = ts[-1] + interval

    first = last = None
    for lo in range(0, ts.size, MARKER_CHUNK):
        hi = min(lo + MARKER_CHUNK, ts.size)
        match = _marker_window_matches(ts, cum, bits, bit_period_us, limit, lo, hi)
        skip = 0
        if first is None:
            hits = np.flatnonzero(match)
            if not hits.size:
                continue
            skip = int(hits[0])
            first = lo + skip
        gaps = np.flatnonzero(~match[skip:])
        if gaps.size:
            last = lo + skip + int(gaps[0]) - 1
            break
        last = hi - 1

    if first is None:
        return None
    return int(ts[(first + last) // 2])


def measure_until_marker(
    power: PowerTrace,
    digital: DigitalTrace,
    pattern: str,
    bit_period_us: int,
) -> tuple[float, int]:
    """
    Energy from the start of the power trace until the completion marker.
    Returns (joules, marker timestamp).
    """
    marker = detect_marker(digital, pattern, bit_period_us)
    if marker is None:
        raise TraceError(f"marker {pattern} not found in digital trace")
    start, end = power.span_us
    if not start <= marker <= end:
        raise TraceError(f"marker at {marker} µs outside power trace [{start}, {end}]")
    return integrate_power(power, (start, marker)), marker


# =====================
# Synthesis
# =====================


def synthesize_power(
    t: Timeline,
    p_base_mw: float,
    p_core_mw: float,
    sample_rate_hz: float,
) -> PowerTrace:
    """
    P(x) = p_base + p_core * sum of cpu_demand of compute events running at
    x, sampled uniformly over [0, total]. The sample at total repeats the
    level just before it.
    """
    if p_base_mw < 0 or p_core_mw < 0:
        raise TraceError("p_base and p_core must be >= 0")
    if sample_rate_hz <= 0:
        raise TraceError("sample rate must be > 0")
    total = t.total_us
    compute = [e for e in t.events if e.is_compute and e.end_us > e.start_us]
    if total <= 0 or not compute:
        raise TraceError("cannot synthesize power from an empty timeline")

    step = 1e6 / sample_rate_hz
    ts = np.unique(np.rint(np.append(np.arange(0, total, step), total)).astype(np.int64))
    instant = np.minimum(ts, total - 1)

    starts = np.array([e.start_us for e in compute], dtype=np.int64)
    ends = np.array([e.end_us for e in compute], dtype=np.int64)
    demand = np.array([e.cpu_demand for e in compute], dtype=np.float64)
    s_order = np.argsort(starts, kind="stable")
    e_order = np.argsort(ends, kind="stable")
    s_cum = np.concatenate(([0.0], np.cumsum(demand[s_order])))
    e_cum = np.concatenate(([0.0], np.cumsum(demand[e_order])))
    started = s_cum[np.searchsorted(starts[s_order], instant, side="right")]
    ended = e_cum[np.searchsorted(ends[e_order], instant, side="right")]
    running = np.clip(started - ended, 0.0, None)

    return PowerTrace(ts, p_base_mw + p_core_mw * running)


def timeline_energy(t: Timeline, p_base_mw: float, p_core_mw: float) -> float:
    """
    Closed form of integrate_power(synthesize_power(t, ...)).
    """
    busy = sum(e.cpu_demand * (e.end_us - e.start_us) for e in t.events if e.is_compute)
    return (p_base_mw * t.total_us + p_core_mw * busy) * MW_US_TO_J


# =====================
# Statistics and lifetime
# =====================


def summarize_runs(values: Sequence[float]) -> tuple[float, float]:
    """
    Mean and half-width of the 95% confidence interval.
    """
    arr = np.asarray(values, dtype=np.float64)
    if not arr.size:
        raise ValueError("no values to summarize")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    q = T_975[arr.size - 1] if arr.size < 30 else Z_975
    return mean, float(q * arr.std(ddof=1) / math.sqrt(arr.size))


def lifetime(p: LifetimeParams) -> float:
    """
    Hours of operation: E_bat / (E_cycle * N).
    """
    if p.battery_mah <= 0 or p.battery_v <= 0:
        raise LifetimeError("battery capacity and voltage must be > 0")
    if min(p.e_btl, p.e_knl, p.e_user, p.e_sdn) < 0:
        raise LifetimeError("phase energies must be >= 0")
    if p.e_cycle <= 0:
        raise LifetimeError("energy per cycle must be > 0")
    if p.cycles_per_hour < 1:
        raise LifetimeError("cycles per hour must be >= 1")
    return p.e_bat / (p.e_cycle * p.cycles_per_hour)


def lifetime_curve(p: LifetimeParams, cycles: Iterable[int]) -> list[tuple[int, float]]:
    return [
        (int(n), lifetime(replace(p, cycles_per_hour=n))) for n in cycles
    ]


def lifetime_improvement(baseline_hours: float, improved_hours: float) -> float:
    if baseline_hours <= 0:
        raise LifetimeError("baseline lifetime must be > 0")
    return (improved_hours - baseline_hours) / baseline_hours * 100


def _phase_data(path: Path | None = None) -> dict:
    return json.loads(Path(path or PHASE_TABLE_FILE).read_text(encoding="utf-8"))


def phase_table(board: str, config: str, sdc: str, fill: str, path: Path | None = None) -> PhaseRow:
    """
    Measured phase durations and energies, 50-run means.
    board rpi3|rpizw, config EU|ALLU-NET3, sdc slow|fast, fill 5|50|95|AVG.
    """
    data = _phase_data(path)
    try:
        values = data["boards"][board][config][sdc][str(fill)]
    except KeyError as exc:
        raise LifetimeError(
            f"no phase table entry for {board}/{config}/{sdc}/{fill}"
        ) from exc
    return PhaseRow(*values)


def forced_forced_bounds(board: str, path: Path | None = None) -> tuple[float, float]:
    """
    Upper bounds (seconds, joules) of a forced-forced shutdown.
    """
    data = _phase_data(path)["forced_forced_shutdown"]
    if board not in data:
        raise LifetimeError(f"no shutdown bounds for board {board}")
    return data[board]["t_max_s"], data[board]["e_max_j"]


def params_from_phase_row(
    row: PhaseRow,
    battery_mah: float,
    battery_v: float,
    e_sdn: float,
    cycles_per_hour: float,
) -> LifetimeParams:
    # the tables only give bootloader and kernel together
    return LifetimeParams(
        battery_mah=battery_mah,
        battery_v=battery_v,
        e_btl=row.e_btl_knl_j,
        e_knl=0.0,
        e_user=row.e_usi_j,
        e_sdn=e_sdn,
        cycles_per_hour=cycles_per_hour,
    )
