"""
Init-system artifacts: one systemd unit per stage, disable/mask scripts for
the unit configuration profiles, and the shutdown command per mode.

Nothing here touches a live host. Everything is returned as text for the
operator to review and install.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from pallex.errors import CatalogError, UnitGenError
from pallex.graph import AppManifest, validate_manifest

DATA_DIR = Path(__file__).resolve().parent / "data"
DEFAULT_CATALOG = DATA_DIR / "rsl-catalog.json"
DEFAULT_GROUPS = DATA_DIR / "unit-groups.json"

CATEGORIES = ("EU", "NRS", "MEMORY", "IO", "MISC")
DISABLE_ACTIONS = ("keep", "disable", "mask")
PROFILE_NAMES = ("EU", "EU+MMS", "EU+NET1", "EU+NET2", "EU+NET3", "ALLU", "ALLU-NET3")
SHUTDOWN_MODES = ("graceful", "forced", "forced_forced")

SAFE_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")

UNIT_TEMPLATE_HEAD = "[Unit]\nDescription=Pallex stage {stage_id} of {app_id}\n"
UNIT_TEMPLATE_TAIL = (
    "\n"
    "[Service]\n"
    "Type=simple\n"
    "Environment=PALLEX_RUNTIME_DIR={runtime_dir}\n"
    "ExecStart={command}\n"
    "\n"
    "[Install]\n"
    "WantedBy=multi-user.target\n"
)


@dataclass(frozen=True)
class UnitCatalogEntry:
    unit_name: str
    category: str
    disable_action: str
    note: str = ""


@dataclass(frozen=True)
class ConfigProfile:
    name: str
    enabled: frozenset[str]
    disabled: frozenset[str]
    masked: frozenset[str]


@dataclass(frozen=True)
class ShutdownCommand:
    mode: str
    command: str
    advisory: tuple[str, ...] = ()


# =====================
# Stage units
# =====================


def unit_file_name(app_id: str, stage_id: str) -> str:
    return f"pallex-{app_id}-{stage_id}.service"


def _check_id(kind: str, value: str):
    if not SAFE_ID_RE.match(value):
        raise UnitGenError(
            f"{kind} {value!r} is not usable in a unit name (allowed: A-Z a-z 0-9 _ -)"
        )


def render_stage_unit(
    app_id: str,
    stage_id: str,
    command: str,
    unit_deps: Iterable[str],
    runtime_dir: str,
) -> str:
    if "\n" in command or "\r" in command:
        raise UnitGenError(f"stage {stage_id}: command must be a single line")
    if not command.strip():
        raise UnitGenError(f"stage {stage_id}: command is empty")
    text = UNIT_TEMPLATE_HEAD.format(stage_id=stage_id, app_id=app_id)
    deps = sorted(unit_deps)
    if deps:
        joined = " ".join(deps)
        text += f"Requires={joined}\nAfter={joined}\n"
    text += UNIT_TEMPLATE_TAIL.format(runtime_dir=runtime_dir, command=command)
    return text


def emit_stage_units(m: AppManifest, runtime_dir: str | Path) -> dict[str, str]:
    """
    Returns {file name: unit text} for every stage of the manifest.

    Only D' goes into Requires=/After=. Stage ordering is left to the
    handoff rendezvous, since a producer stays alive until its consumers
    have read its message.
    """
    report = validate_manifest(m)
    if not report.ok:
        raise UnitGenError(f"manifest {m.app_id!r} is invalid: " + "; ".join(report.lines()))
    _check_id("app id", m.app_id)

    files: dict[str, str] = {}
    for stage in sorted(m.stages, key=lambda s: s.id):
        _check_id("stage id", stage.id)
        files[unit_file_name(m.app_id, stage.id)] = render_stage_unit(
            m.app_id, stage.id, stage.command, stage.unit_deps, str(runtime_dir)
        )
    logging.info("rendered %d unit(s) for %s", len(files), m.app_id)
    return files


# =====================
# Catalog and profiles
# =====================


def _read_json(path: Path, what: str):
    path = Path(path).expanduser()
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: invalid JSON ({exc})") from exc


def catalog_from_list(raw: list) -> tuple[UnitCatalogEntry, ...]:
    if not isinstance(raw, list):
        raise CatalogError("catalog must be a JSON array")
    entries = []
    seen = set()
    for idx, item in enumerate(raw):
        if not isinstance(item, dict):
            raise CatalogError(f"catalog[{idx}] must be an object")
        name = item.get("unit_name")
        category = item.get("category")
        action = item.get("disable_action")
        if not isinstance(name, str) or not name:
            raise CatalogError(f"catalog[{idx}].unit_name must be a non-empty string")
        if category not in CATEGORIES:
            raise CatalogError(f"{name}: unknown category {category!r}")
        if action not in DISABLE_ACTIONS:
            raise CatalogError(f"{name}: unknown disable_action {action!r}")
        if category == "EU" and action != "keep":
            raise CatalogError(f"{name}: essential units must use disable_action keep")
        if name in seen:
            raise CatalogError(f"{name}: listed twice in catalog")
        seen.add(name)
        entries.append(UnitCatalogEntry(name, category, action, str(item.get("note", ""))))
    return tuple(sorted(entries, key=lambda e: e.unit_name))


def load_catalog(path: Path | None = None) -> tuple[UnitCatalogEntry, ...]:
    return catalog_from_list(_read_json(path or DEFAULT_CATALOG, "Unit catalog"))


def load_unit_groups(path: Path | None = None) -> dict[str, frozenset[str]]:
    raw = _read_json(path or DEFAULT_GROUPS, "Unit groups")
    if not isinstance(raw, dict):
        raise CatalogError("unit groups must be a JSON object")
    groups = {}
    for name, units in raw.items():
        if not isinstance(units, list) or not all(isinstance(u, str) for u in units):
            raise CatalogError(f"group {name}: must be a list of unit names")
        groups[name] = frozenset(units)
    return groups


def _group(groups: dict[str, frozenset[str]], name: str) -> frozenset[str]:
    if name not in groups:
        raise CatalogError(f"unknown unit group: {name}")
    return groups[name]


def build_profile(
    name: str,
    catalog: Iterable[UnitCatalogEntry],
    groups: dict[str, frozenset[str]] | None = None,
) -> ConfigProfile:
    """
    EU keeps the essential units only, EU+<group> adds one group, ALLU keeps
    everything and ALLU-<group> everything but one group.
    """
    entries = list(catalog)
    groups = load_unit_groups() if groups is None else groups
    known = {e.unit_name for e in entries}
    essential = frozenset(e.unit_name for e in entries if e.category == "EU")

    if name == "EU":
        enabled = essential
    elif name == "ALLU":
        enabled = frozenset(known)
    elif name.startswith("EU+"):
        enabled = essential | _group(groups, name[3:])
    elif name.startswith("ALLU-"):
        removed = _group(groups, name[5:])
        if removed & essential:
            raise CatalogError(
                f"profile {name} would disable essential units: "
                + " ".join(sorted(removed & essential))
            )
        enabled = frozenset(known) - removed
    else:
        raise UnitGenError(
            f"unknown profile {name!r} (expected one of: {', '.join(PROFILE_NAMES)})"
        )

    unknown = sorted(enabled - known)
    if unknown:
        raise CatalogError(f"profile {name} references unknown unit: {unknown[0]}")

    masked = frozenset(
        e.unit_name for e in entries if e.disable_action == "mask" and e.unit_name not in enabled
    )
    disabled = frozenset(known) - enabled - masked
    return ConfigProfile(name=name, enabled=enabled, disabled=disabled, masked=masked)


def emit_config_script(p: ConfigProfile, catalog: Iterable[UnitCatalogEntry]) -> list[str]:
    entries = {e.unit_name: e for e in catalog}
    for unit in sorted(p.enabled | p.disabled | p.masked):
        if unit not in entries:
            raise CatalogError(f"profile {p.name} references unknown unit: {unit}")
    essential_off = sorted(
        name for name, e in entries.items() if e.category == "EU" and name not in p.enabled
    )
    if essential_off:
        raise CatalogError(f"profile {p.name} leaves essential unit disabled: {essential_off[0]}")

    off = sorted(name for name in entries if name not in p.enabled)
    commands = [f"systemctl disable {unit}" for unit in off]
    commands += [f"systemctl mask {unit}" for unit in sorted(p.masked)]
    return commands


# =====================
# Shutdown
# =====================

SAVE_STATE_ADVICE = (
    "shutdown events are not logged and units are not stopped",
    "run 'fake-hwclock save' manually before halting",
    "run 'systemd-random-seed save' manually before halting",
)


def shutdown_command(mode: str) -> ShutdownCommand:
    if mode == "graceful":
        return ShutdownCommand(mode, "systemctl poweroff")
    if mode == "forced":
        return ShutdownCommand(mode, "systemctl halt --force", SAVE_STATE_ADVICE)
    if mode == "forced_forced":
        return ShutdownCommand(
            mode,
            "systemctl halt --force --force",
            (
                "WARNING: this command may cause data corruption",
                "stop the application processes first",
                "run 'sync' to flush file system buffers",
                "run 'fake-hwclock save' manually before halting",
                "run 'systemd-random-seed save' manually before halting",
            ),
        )
    raise UnitGenError(
        f"unknown shutdown mode {mode!r} (expected one of: {', '.join(SHUTDOWN_MODES)})"
    )
