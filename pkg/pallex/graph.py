"""
Application manifests: stages, their stage dependencies D and unit
dependencies D', validation, deterministic ordering and earliest-start
analysis with unlimited cores.

Times are carried as integer microseconds internally and reported in
milliseconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import networkx as nx

from pallex.errors import ManifestError, MissingEntryError


# =====================
# Time helpers
# =====================


def ms_to_us(value_ms: float) -> int:
    return int(round(float(value_ms) * 1000))


def us_to_ms(value_us: int) -> float:
    return value_us / 1000


def format_ms(value_us: int) -> str:
    """
    810000 -> "810", 2500 -> "2.5"; stable text for CSV output.
    """
    if value_us % 1000 == 0:
        return str(value_us // 1000)
    return f"{value_us / 1000:.3f}".rstrip("0").rstrip(".")


# =====================
# Types
# =====================


@dataclass(frozen=True)
class StageSpec:
    id: str
    command: str
    stage_deps: frozenset[str] = frozenset()
    unit_deps: frozenset[str] = frozenset()
    payload_hint: int | None = None


@dataclass(frozen=True)
class AppManifest:
    app_id: str
    stages: tuple[StageSpec, ...] = ()
    target_platform: str = ""

    def stage(self, stage_id: str) -> StageSpec:
        for s in self.stages:
            if s.id == stage_id:
                return s
        raise ManifestError(f"unknown stage {stage_id!r} in app {self.app_id!r}")

    @property
    def stage_ids(self) -> list[str]:
        return sorted(s.id for s in self.stages)


@dataclass(frozen=True)
class Violation:
    kind: str  # empty-id | duplicate-id | self-loop | unknown-dep | cycle
    stage_ids: tuple[str, ...]
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        if self.ok:
            return ["ok"]
        return [f"{v.kind}: {v.message}" for v in self.violations]


# =====================
# Manifest I/O
# =====================


def _string_list(value, what: str) -> frozenset[str]:
    if value is None:
        return frozenset()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ManifestError(f"{what} must be a list of strings")
    return frozenset(value)


def manifest_from_dict(obj: Mapping) -> AppManifest:
    if not isinstance(obj, Mapping):
        raise ManifestError("manifest must be a JSON object")
    app_id = obj.get("app_id")
    if not isinstance(app_id, str) or not app_id:
        raise ManifestError("manifest.app_id must be a non-empty string")
    stages_raw = obj.get("stages", [])
    if not isinstance(stages_raw, list):
        raise ManifestError("manifest.stages must be a list")

    stages = []
    for idx, raw in enumerate(stages_raw):
        if not isinstance(raw, Mapping):
            raise ManifestError(f"stages[{idx}] must be an object")
        stage_id = raw.get("id")
        if not isinstance(stage_id, str):
            raise ManifestError(f"stages[{idx}].id must be a string")
        command = raw.get("command", "")
        if not isinstance(command, str):
            raise ManifestError(f"stage {stage_id}: command must be a string")
        hint = raw.get("payload_hint")
        if hint is not None and (not isinstance(hint, int) or hint < 0):
            raise ManifestError(f"stage {stage_id}: payload_hint must be an int >= 0")
        stages.append(
            StageSpec(
                id=stage_id,
                command=command,
                stage_deps=_string_list(raw.get("stage_deps"), f"stage {stage_id}: stage_deps"),
                unit_deps=_string_list(raw.get("unit_deps"), f"stage {stage_id}: unit_deps"),
                payload_hint=hint,
            )
        )

    return AppManifest(
        app_id=app_id,
        stages=tuple(stages),
        target_platform=str(obj.get("target_platform", "")),
    )


def load_manifest(path: Path) -> AppManifest:
    manifest_path = Path(path).expanduser()
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    return manifest_from_dict(data)


def manifest_to_dict(m: AppManifest) -> dict:
    stages = []
    for s in m.stages:
        entry = {
            "id": s.id,
            "command": s.command,
            "stage_deps": sorted(s.stage_deps),
            "unit_deps": sorted(s.unit_deps),
        }
        if s.payload_hint is not None:
            entry["payload_hint"] = s.payload_hint
        stages.append(entry)
    return {"app_id": m.app_id, "target_platform": m.target_platform, "stages": stages}


# =====================
# Analysis
# =====================


def stage_graph(m: AppManifest) -> nx.DiGraph:
    """
    Edge p -> s for every p in D(s). Unknown predecessors and self-loops are
    left out; validate_manifest reports them.
    """
    graph = nx.DiGraph()
    known = {s.id for s in m.stages}
    graph.add_nodes_from(sorted(known))
    for s in m.stages:
        for dep in sorted(s.stage_deps):
            if dep in known and dep != s.id:
                graph.add_edge(dep, s.id)
    return graph


def _normalize_cycle(cycle: list[str]) -> tuple[str, ...]:
    pivot = cycle.index(min(cycle))
    return tuple(cycle[pivot:] + cycle[:pivot])


def validate_manifest(m: AppManifest) -> ValidationReport:
    violations: list[Violation] = []

    seen: dict[str, int] = {}
    for s in m.stages:
        seen[s.id] = seen.get(s.id, 0) + 1
        if not s.id:
            violations.append(Violation("empty-id", ("",), "stage with empty id"))
    for stage_id, count in sorted(seen.items()):
        if count > 1 and stage_id:
            violations.append(
                Violation("duplicate-id", (stage_id,), f"{stage_id} defined {count} times")
            )

    for s in sorted(m.stages, key=lambda st: st.id):
        if s.id in s.stage_deps:
            violations.append(
                Violation("self-loop", (s.id,), f"{s.id} depends on itself")
            )
        for dep in sorted(s.stage_deps - set(seen)):
            violations.append(
                Violation("unknown-dep", (s.id, dep), f"{s.id} depends on unknown stage {dep}")
            )

    cycles = sorted({_normalize_cycle(c) for c in nx.simple_cycles(stage_graph(m))})
    for cycle in cycles:
        violations.append(
            Violation("cycle", cycle, "cycle " + " -> ".join(cycle + (cycle[0],)))
        )

    return ValidationReport(tuple(violations))


def _require_valid(m: AppManifest):
    report = validate_manifest(m)
    if not report.ok:
        raise ManifestError(
            f"manifest {m.app_id!r} is invalid: " + "; ".join(report.lines())
        )


def topo_order(m: AppManifest) -> list[str]:
    _require_valid(m)
    return list(nx.lexicographical_topological_sort(stage_graph(m)))


def successors(m: AppManifest, stage_id: str) -> list[str]:
    return sorted(s.id for s in m.stages if stage_id in s.stage_deps)


def _earliest_us(
    m: AppManifest,
    unit_ready: Mapping[str, float],
    stage_durations: Mapping[str, float],
) -> dict[str, tuple[int, int]]:
    order = topo_order(m)
    times: dict[str, tuple[int, int]] = {}
    for stage_id in order:
        stage = m.stage(stage_id)
        if stage_id not in stage_durations:
            raise MissingEntryError("stage duration", stage_id)
        duration = ms_to_us(stage_durations[stage_id])
        if duration < 0:
            raise ManifestError(f"stage {stage_id}: duration must be >= 0")
        start = 0
        for unit in sorted(stage.unit_deps):
            if unit not in unit_ready:
                raise MissingEntryError("unit_ready", unit)
            start = max(start, ms_to_us(unit_ready[unit]))
        for dep in stage.stage_deps:
            start = max(start, times[dep][1])
        times[stage_id] = (start, start + duration)
    return times


def earliest_start(
    m: AppManifest,
    unit_ready: Mapping[str, float],
    stage_durations: Mapping[str, float],
) -> dict[str, tuple[float, float]]:
    """
    start(s) = max(unit_ready over D'(s), finish over D(s), 0);
    finish(s) = start(s) + duration(s). Results in ms.
    """
    return {
        stage_id: (us_to_ms(start), us_to_ms(finish))
        for stage_id, (start, finish) in _earliest_us(m, unit_ready, stage_durations).items()
    }


def critical_path(
    m: AppManifest,
    unit_ready: Mapping[str, float],
    stage_durations: Mapping[str, float],
) -> list[str]:
    """
    Stages on the chain that ends at the maximum finish time. A stage is
    preceded by the predecessor that bounds its start; when a unit bounds
    it instead, the chain starts there.
    """
    times = _earliest_us(m, unit_ready, stage_durations)
    if not times:
        return []
    last = min(times, key=lambda sid: (-times[sid][1], sid))
    chain = [last]
    while True:
        stage = m.stage(chain[-1])
        start = times[stage.id][0]
        bounding = sorted(d for d in stage.stage_deps if times[d][1] == start)
        if not bounding:
            break
        chain.append(bounding[0])
    return list(reversed(chain))
