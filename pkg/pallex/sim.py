"""
Discrete-event simulation of one duty cycle.

Bootloader and kernel run as fixed phases, then userspace activates units on
k cores while application stages start per their stage dependencies D and
unit dependencies D'. Admission is non-preemptive and greedy: at every event
instant the ready tasks are tried in order (units before stages, then by id)
and each one that still fits in the remaining capacity starts.

All times are integer microseconds inside; reports are in milliseconds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import networkx as nx

from pallex.errors import MissingEntryError, SimulationError
from pallex.graph import AppManifest, format_ms, ms_to_us, successors, topo_order, us_to_ms

PRESETS_FILE = Path(__file__).resolve().parent / "data" / "boot-presets.json"

LAUNCH_MODES = ("pallex", "rc_local")
PHASE_TASKS = ("bootloader", "kernel")
CAPACITY_EPS = 1e-9
GANTT_HEADER = "task,kind,start_ms,end_ms"
BLAME_HEADER = "unit,blame_ms"


# =====================
# Types
# =====================


@dataclass(frozen=True)
class UnitProfile:
    unit_name: str
    duration_ms: float
    unit_deps: frozenset[str] = frozenset()
    cpu_demand: float = 1.0
    ordered_after_deps: bool = True


@dataclass(frozen=True)
class StageProfile:
    duration_ms: float
    cpu_demand: float = 1.0


@dataclass(frozen=True)
class BootPhases:
    t_btl_ms: float
    t_knl_ms: float
    systemd_init_delay_ms: float = 0.0

    def __post_init__(self):
        if min(self.t_btl_ms, self.t_knl_ms, self.systemd_init_delay_ms) < 0:
            raise SimulationError("boot phase durations must be >= 0")


@dataclass(frozen=True)
class Event:
    task: str
    kind: str  # phase | unit | stage_compute | stage_blocked
    start_us: int
    end_us: int
    cpu_demand: float

    @property
    def is_compute(self) -> bool:
        return self.kind != "stage_blocked"


@dataclass(frozen=True)
class Timeline:
    events: tuple[Event, ...]
    core_count: int | None  # None: unbounded
    userspace_start_us: int
    t_usi_us: int

    @property
    def total_us(self) -> int:
        return self.userspace_start_us + self.t_usi_us

    @property
    def total_ms(self) -> float:
        return us_to_ms(self.total_us)

    @property
    def t_usi_ms(self) -> float:
        return us_to_ms(self.t_usi_us)

    def event(self, task: str, kind: str) -> Event | None:
        for e in self.events:
            if e.task == task and e.kind == kind:
                return e
        return None


# =====================
# Loaders
# =====================


def _read_json(path: Path, what: str):
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SimulationError(f"{path}: invalid JSON ({exc})") from exc


def unit_profiles_from_list(raw: list) -> tuple[UnitProfile, ...]:
    if not isinstance(raw, list):
        raise SimulationError("unit profiles must be a JSON array")
    units = []
    for idx, item in enumerate(raw):
        if not isinstance(item, dict) or not isinstance(item.get("unit_name"), str):
            raise SimulationError(f"unit profile [{idx}] needs a unit_name")
        deps = item.get("unit_deps", [])
        if not isinstance(deps, list):
            raise SimulationError(f"{item['unit_name']}: unit_deps must be a list")
        units.append(
            UnitProfile(
                unit_name=item["unit_name"],
                duration_ms=float(item.get("duration_ms", 0)),
                unit_deps=frozenset(deps),
                cpu_demand=float(item.get("cpu_demand", 1.0)),
                ordered_after_deps=bool(item.get("ordered_after_deps", True)),
            )
        )
    return tuple(units)


def load_unit_profiles(path: Path) -> tuple[UnitProfile, ...]:
    return unit_profiles_from_list(_read_json(path, "Unit profiles"))


def load_stage_profiles(path: Path) -> dict[str, StageProfile]:
    """
    {"stage_id": {"duration_ms": 120, "cpu_demand": 0.5}, ...}
    """
    raw = _read_json(path, "Stage profiles")
    if not isinstance(raw, dict):
        raise SimulationError("stage profiles must be a JSON object")
    profiles = {}
    for stage_id, item in raw.items():
        if not isinstance(item, dict) or "duration_ms" not in item:
            raise SimulationError(f"stage profile {stage_id}: duration_ms is required")
        profiles[stage_id] = StageProfile(
            duration_ms=float(item["duration_ms"]),
            cpu_demand=float(item.get("cpu_demand", 1.0)),
        )
    return profiles


def load_boot_presets(path: Path | None = None) -> dict[str, BootPhases]:
    raw = _read_json(path or PRESETS_FILE, "Boot presets")
    return {
        name: BootPhases(v["t_btl_ms"], v["t_knl_ms"], v["systemd_init_delay_ms"])
        for name, v in raw.items()
    }


def boot_phases(value: str) -> BootPhases:
    """
    A preset name (rpi3, rpizw, none) or "t_btl,t_knl,delay" in ms.
    """
    presets = load_boot_presets()
    if value in presets:
        return presets[value]
    parts = value.split(",")
    if len(parts) != 3:
        raise ValueError(
            f"phases must be one of {', '.join(sorted(presets))} or t_btl,t_knl,delay (got {value!r})"
        )
    try:
        return BootPhases(*(float(p) for p in parts))
    except ValueError as exc:
        raise ValueError(f"phases: not a number in {value!r}") from exc


# =====================
# Checks
# =====================


def _check_inputs(
    units: Iterable[UnitProfile],
    m: AppManifest,
    stage_profiles: Mapping[str, StageProfile],
    cores: int | None,
    launch: str,
) -> dict[str, UnitProfile]:
    if cores is not None and cores < 1:
        raise SimulationError("cores must be >= 1")
    if launch not in LAUNCH_MODES:
        raise SimulationError(f"unknown launch mode {launch!r}")

    by_name: dict[str, UnitProfile] = {}
    for u in units:
        if u.unit_name in by_name:
            raise SimulationError(f"unit {u.unit_name} listed twice")
        if u.unit_name in PHASE_TASKS:
            raise SimulationError(f"unit name {u.unit_name} is reserved for boot phases")
        if u.duration_ms < 0:
            raise SimulationError(f"unit {u.unit_name}: duration must be >= 0")
        if not 0 <= u.cpu_demand <= 1:
            raise SimulationError(f"unit {u.unit_name}: cpu_demand must be in [0, 1]")
        by_name[u.unit_name] = u

    unit_graph = nx.DiGraph()
    unit_graph.add_nodes_from(by_name)
    for u in by_name.values():
        for dep in sorted(u.unit_deps):
            if dep not in by_name:
                raise MissingEntryError("unit profile", dep)
            unit_graph.add_edge(dep, u.unit_name)
    if not nx.is_directed_acyclic_graph(unit_graph):
        cycle = nx.find_cycle(unit_graph)
        raise SimulationError(
            "unit dependency cycle: " + " -> ".join([a for a, _ in cycle] + [cycle[0][0]])
        )

    for stage in m.stages:
        if stage.id in PHASE_TASKS or stage.id in by_name:
            raise SimulationError(f"stage id {stage.id} collides with a unit or phase name")
        if stage.id not in stage_profiles:
            raise MissingEntryError("stage profile", stage.id)
        profile = stage_profiles[stage.id]
        if profile.duration_ms < 0:
            raise SimulationError(f"stage {stage.id}: duration must be >= 0")
        if not 0 <= profile.cpu_demand <= 1:
            raise SimulationError(f"stage {stage.id}: cpu_demand must be in [0, 1]")
        for unit in sorted(stage.unit_deps):
            if unit not in by_name:
                raise MissingEntryError("unit profile", unit)
    return by_name


# =====================
# Simulation
# =====================


def simulate_boot(
    units: Iterable[UnitProfile],
    m: AppManifest,
    stage_profiles: Mapping[str, StageProfile],
    phases: BootPhases,
    cores: int | None = 1,
    launch: str = "pallex",
) -> Timeline:
    """
    Units may be requested before their deps complete (ordered_after_deps
    false) but never execute before them. Stages become requestable at
    userspace start plus the systemd init delay; with launch="rc_local"
    they additionally wait until every unit has completed.
    """
    units_by_name = _check_inputs(units, m, stage_profiles, cores, launch)
    order = topo_order(m)

    t_btl = ms_to_us(phases.t_btl_ms)
    userspace = t_btl + ms_to_us(phases.t_knl_ms)
    stage_ready_at = userspace + ms_to_us(phases.systemd_init_delay_ms)

    events: list[Event] = [
        Event("bootloader", "phase", 0, t_btl, 1.0),
        Event("kernel", "phase", t_btl, userspace, 1.0),
    ]
    unit_done: dict[str, int] = {}
    stage_done: dict[str, int] = {}
    stage_start: dict[str, int] = {}
    running: list[Event] = []
    pending_units = set(units_by_name)
    pending_stages = set(order)
    now = userspace

    def ready_tasks() -> list[tuple[str, str, int, float]]:
        ready = []
        for name in sorted(pending_units):
            u = units_by_name[name]
            if all(d in unit_done for d in u.unit_deps):
                ready.append((name, "unit", ms_to_us(u.duration_ms), u.cpu_demand))
        if now < stage_ready_at:
            return ready
        if launch == "rc_local" and pending_units | {e.task for e in running if e.kind == "unit"}:
            return ready
        for stage_id in sorted(pending_stages):
            stage = m.stage(stage_id)
            if all(u in unit_done for u in stage.unit_deps) and all(
                d in stage_done for d in stage.stage_deps
            ):
                profile = stage_profiles[stage_id]
                ready.append(
                    (stage_id, "stage_compute", ms_to_us(profile.duration_ms), profile.cpu_demand)
                )
        return ready

    while pending_units or pending_stages or running:
        progressed = True
        while progressed:
            progressed = False
            for e in [e for e in running if e.end_us <= now]:
                running.remove(e)
                if e.kind == "unit":
                    unit_done[e.task] = e.end_us
                else:
                    stage_done[e.task] = e.end_us
                progressed = True

            used = sum(e.cpu_demand for e in running)
            for task, kind, duration, demand in ready_tasks():
                if cores is not None and used + demand > cores + CAPACITY_EPS:
                    continue
                e = Event(task, kind, now, now + duration, demand)
                events.append(e)
                running.append(e)
                used += demand
                if kind == "unit":
                    pending_units.discard(task)
                else:
                    pending_stages.discard(task)
                    stage_start[task] = now
                progressed = True

        candidates = [e.end_us for e in running]
        if pending_stages and now < stage_ready_at:
            candidates.append(stage_ready_at)
        if not candidates:
            if pending_units or pending_stages:
                stuck = sorted(pending_units | pending_stages)
                raise SimulationError("simulation stalled with pending tasks: " + ", ".join(stuck))
            break
        now = min(candidates)

    for stage_id in order:
        succ = successors(m, stage_id)
        if not succ:
            continue
        blocked_until = max(stage_start[s] for s in succ)
        if blocked_until > stage_done[stage_id]:
            events.append(
                Event(stage_id, "stage_blocked", stage_done[stage_id], blocked_until, 0.0)
            )

    last = max((e.end_us for e in events if e.start_us >= userspace), default=userspace)
    logging.debug(
        "launch=%s cores=%s: %d units, %d stages, userspace init ends at %d us",
        launch,
        cores,
        len(units_by_name),
        len(order),
        max(last, userspace),
    )
    return Timeline(
        events=tuple(sorted(events, key=lambda e: (e.start_us, e.task, e.end_us))),
        core_count=cores,
        userspace_start_us=userspace,
        t_usi_us=max(last, userspace) - userspace,
    )


def unit_request_us(t: Timeline, u: UnitProfile) -> int:
    if not u.ordered_after_deps or not u.unit_deps:
        return t.userspace_start_us
    ends = []
    for dep in u.unit_deps:
        e = t.event(dep, "unit")
        if e is None:
            raise SimulationError(f"unit {dep} not in timeline")
        ends.append(e.end_us)
    return max(ends)


def blame_report(t: Timeline, units: Iterable[UnitProfile]) -> dict[str, float]:
    """
    completion - request per unit, in ms. An unordered unit is requested
    at userspace start, so its blame includes the time spent waiting for
    its deps.
    """
    blame = {}
    for u in units:
        e = t.event(u.unit_name, "unit")
        if e is None:
            raise SimulationError(f"unit {u.unit_name} not in timeline")
        blame[u.unit_name] = us_to_ms(e.end_us - unit_request_us(t, u))
    return blame


def export_gantt(t: Timeline) -> list[tuple[str, str, float, float]]:
    return [(e.task, e.kind, us_to_ms(e.start_us), us_to_ms(e.end_us)) for e in t.events]


def format_gantt_csv(t: Timeline) -> str:
    lines = [GANTT_HEADER]
    for e in t.events:
        lines.append(f"{e.task},{e.kind},{format_ms(e.start_us)},{format_ms(e.end_us)}")
    return "\n".join(lines) + "\n"


def format_blame_csv(blame: Mapping[str, float]) -> str:
    lines = [BLAME_HEADER]
    for unit, value in sorted(blame.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{unit},{format_ms(ms_to_us(value))}")
    return "\n".join(lines) + "\n"


def compare_launch(
    units: Iterable[UnitProfile],
    m: AppManifest,
    stage_profiles: Mapping[str, StageProfile],
    phases: BootPhases,
    cores: int | None = 1,
) -> dict[str, float]:
    """
    Total cycle time with stages launched per D/D' against launching them
    only after every unit has come up.
    """
    units = tuple(units)
    pallex = simulate_boot(units, m, stage_profiles, phases, cores, launch="pallex")
    baseline = simulate_boot(units, m, stage_profiles, phases, cores, launch="rc_local")
    improvement = 0.0
    if baseline.total_us > 0:
        improvement = (baseline.total_us - pallex.total_us) / baseline.total_us * 100
    return {
        "pallex_total_ms": pallex.total_ms,
        "baseline_total_ms": baseline.total_ms,
        "improvement_pct": improvement,
    }
