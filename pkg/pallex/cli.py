#!/usr/bin/env python3
"""
Command line entry point: python -m pallex <subcommand> ...

Machine-readable results go to stdout, logs and errors to stderr.
Exit codes: 0 ok, 1 domain error, 2 usage error, 130 interrupted.
"""

import argparse
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from pallex import energy, graph, handoff, notify, sim, unitgen
from pallex.config import load_config, load_env_file, runtime_dir
from pallex.errors import ManifestError, PallexError

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


# --------------------
# Helpers
# --------------------
def setup_logging(verbose: int):
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, os.getenv("PALLEX_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


def parse_cores(value: str) -> int | None:
    if value.lower() in {"inf", "unbounded"}:
        return None
    try:
        cores = int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cores must be an integer or 'inf', got {value!r}") from exc
    if cores < 1:
        raise argparse.ArgumentTypeError("cores must be >= 1")
    return cores


def parse_window(value: str) -> tuple[int, int]:
    try:
        lo, hi = (int(part) for part in value.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"window must be t0:t1 in µs, got {value!r}") from exc
    return lo, hi


def parse_range(value: str) -> range:
    try:
        lo, hi = (int(part) for part in value.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"sweep must be A:B, got {value!r}") from exc
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError("sweep needs 1 <= A <= B")
    return range(lo, hi + 1)


def emit(text: str):
    sys.stdout.write(text)
    sys.stdout.flush()


# --------------------
# graph / validate
# --------------------
def cmd_validate(args, config) -> int:
    report = graph.validate_manifest(graph.load_manifest(args.manifest))
    emit("\n".join(report.lines()) + "\n")
    return 0 if report.ok else 1


def _read_unit_ready(path: Path | None) -> dict[str, float]:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: unit_ready must be a JSON object of unit -> ms")
    return {k: float(v) for k, v in data.items()}


def cmd_graph(args, config) -> int:
    m = graph.load_manifest(args.manifest)
    order = graph.topo_order(m)
    if args.stage_profiles is None:
        emit("".join(f"{stage_id}\n" for stage_id in order))
        return 0

    durations = {k: v.duration_ms for k, v in sim.load_stage_profiles(args.stage_profiles).items()}
    unit_ready = _read_unit_ready(args.unit_ready)
    times = graph.earliest_start(m, unit_ready, durations)
    lines = ["stage,start_ms,finish_ms"]
    for stage_id in order:
        start, finish = times[stage_id]
        lines.append(
            f"{stage_id},{graph.format_ms(graph.ms_to_us(start))},{graph.format_ms(graph.ms_to_us(finish))}"
        )
    if args.critical_path:
        chain = graph.critical_path(m, unit_ready, durations)
        lines.append("critical_path," + " ".join(chain))
    emit("\n".join(lines) + "\n")
    return 0


# --------------------
# unitgen
# --------------------
def cmd_gen_units(args, config) -> int:
    m = graph.load_manifest(args.manifest)
    rt_dir = args.runtime_dir or runtime_dir(config)
    files = unitgen.emit_stage_units(m, rt_dir)

    if args.output_dir is None:
        chunks = [f"==> {name} <==\n{text}" for name, text in files.items()]
        emit("\n".join(chunks))
        return 0

    out = Path(args.output_dir).expanduser()
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        path = out / name
        path.write_bytes(text.encode("utf-8"))
        logging.info("wrote %s", path)
        emit(f"{path}\n")
    return 0


def cmd_gen_config(args, config) -> int:
    catalog = unitgen.load_catalog(args.catalog)
    groups = unitgen.load_unit_groups(args.groups)
    profile = unitgen.build_profile(args.profile, catalog, groups)
    commands = unitgen.emit_config_script(profile, catalog)
    emit("".join(f"{line}\n" for line in commands))
    return 0


def cmd_shutdown(args, config) -> int:
    result = unitgen.shutdown_command(args.mode)
    emit(result.command + "\n" + "".join(f"# {note}\n" for note in result.advisory))
    return 0


# --------------------
# sim
# --------------------
def _simulation_inputs(args):
    units = sim.load_unit_profiles(args.units) if args.units else ()
    if args.manifest:
        m = graph.load_manifest(args.manifest)
    else:
        m = graph.AppManifest(app_id="none")
    stage_profiles = sim.load_stage_profiles(args.stage_profiles) if args.stage_profiles else {}
    return units, m, stage_profiles, sim.boot_phases(args.phases)


def cmd_simulate(args, config) -> int:
    units, m, stage_profiles, phases = _simulation_inputs(args)
    timeline = sim.simulate_boot(units, m, stage_profiles, phases, args.cores, args.launch)
    logging.info(
        "simulated %d events on %s core(s): total %.3f ms",
        len(timeline.events),
        args.cores or "unbounded",
        timeline.total_ms,
    )

    if args.power_out:
        power = config["power"]
        trace = energy.synthesize_power(
            timeline, power["p_base_mw"], power["p_core_mw"], power["sample_rate_hz"]
        )
        Path(args.power_out).write_text(energy.format_power_csv(trace), encoding="utf-8")
        logging.info("wrote synthesized power trace to %s", args.power_out)

    sections = []
    if args.blame:
        sections.append(sim.format_blame_csv(sim.blame_report(timeline, units)))
    if args.gantt:
        sections.append(sim.format_gantt_csv(timeline))
    if args.compare:
        result = sim.compare_launch(units, m, stage_profiles, phases, args.cores)
        sections.append(
            "metric,value\n"
            f"pallex_total_ms,{result['pallex_total_ms']:.3f}\n"
            f"baseline_total_ms,{result['baseline_total_ms']:.3f}\n"
            f"improvement_pct,{result['improvement_pct']:.2f}\n"
        )
    if not sections:
        sections.append(
            "metric,value\n"
            f"userspace_start_ms,{graph.format_ms(timeline.userspace_start_us)}\n"
            f"t_usi_ms,{graph.format_ms(timeline.t_usi_us)}\n"
            f"total_ms,{graph.format_ms(timeline.total_us)}\n"
        )
    emit("\n".join(sections))
    return 0


def cmd_blame(args, config) -> int:
    args.blame, args.gantt, args.compare, args.power_out = True, False, False, None
    return cmd_simulate(args, config)


def cmd_gantt(args, config) -> int:
    args.blame, args.gantt, args.compare, args.power_out = False, True, False, None
    return cmd_simulate(args, config)


# --------------------
# energy
# --------------------
def cmd_energy(args, config) -> int:
    if args.marker and len(args.marker) != len(args.traces):
        raise ValueError("give one --marker digital trace per power trace")
    if args.marker and (args.pattern is None or args.bit_period is None):
        raise ValueError("--marker needs --pattern and --bit-period")

    values = []
    lines = []
    for idx, path in enumerate(args.traces):
        if args.marker:
            trace = energy.read_power_csv(path, quantize=args.quantize)
            digital = energy.read_digital_csv(args.marker[idx])
            value, marker = energy.measure_until_marker(trace, digital, args.pattern, args.bit_period)
            logging.info("%s: marker at %d µs", path, marker)
        elif args.stream:
            value = energy.integrate_power_csv(path, args.window, quantize=args.quantize)
        else:
            value = energy.integrate_power(
                energy.read_power_csv(path, quantize=args.quantize), args.window
            )
        values.append(value)
        lines.append(f"{path},{value:.3f}")

    if len(values) > 1:
        mean, half = energy.summarize_runs(values)
        lines.append(f"mean,{mean:.3f}")
        lines.append(f"ci95,{half:.3f}")
    emit("\n".join(lines) + "\n")
    return 0


def cmd_segment(args, config) -> int:
    trace = energy.read_power_csv(args.trace, quantize=args.quantize)
    boundaries = [int(b) for b in args.boundaries.split(",") if b.strip()] if args.boundaries else []
    emit(energy.format_segment_csv(energy.segment_phases(trace, boundaries)))
    return 0


def cmd_lifetime(args, config) -> int:
    phases = (args.e_btl, args.e_knl, args.e_user, args.e_sdn)
    if args.table:
        parts = args.table.split("/")
        if len(parts) != 4:
            raise ValueError("--table must be board/config/sdc/fill, e.g. rpi3/EU/slow/5")
        row = energy.phase_table(*parts)
        params = energy.params_from_phase_row(
            row, args.mah, args.volt, args.e_sdn or 0.0, args.n
        )
    elif args.e is not None:
        params = energy.LifetimeParams(args.mah, args.volt, args.e, 0.0, 0.0, 0.0, args.n)
    elif any(v is not None for v in phases):
        params = energy.LifetimeParams(
            args.mah, args.volt, *(v or 0.0 for v in phases), args.n
        )
    else:
        raise ValueError("give --e, the phase energies, or --table")

    if args.sweep:
        curve = energy.lifetime_curve(params, args.sweep)
        emit("cycles_per_hour,hours\n" + "".join(f"{n},{h:.6f}\n" for n, h in curve))
        return 0
    emit(f"{energy.lifetime(params):.6f} h\n")
    return 0


# --------------------
# run-stage
# --------------------
def cmd_run_stage(args, config) -> int:
    m = graph.load_manifest(args.manifest)
    graph.topo_order(m)
    if args.app != m.app_id:
        raise ManifestError(f"--app {args.app!r} does not match manifest app_id {m.app_id!r}")
    stage = m.stage(args.stage)

    command = list(args.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        command = shlex.split(stage.command)
    if not command:
        raise ManifestError(f"stage {stage.id}: no command to run")

    rt_dir = Path(args.runtime_dir) if args.runtime_dir else runtime_dir(config)
    retry_ms = args.retry_ms or config["handoff"]["retry_interval_ms"]
    timeout_ms = args.timeout_ms or config["handoff"]["timeout_ms"]
    predecessors = [
        handoff.HandoffEndpoint(m.app_id, dep, rt_dir, role="consumer")
        for dep in sorted(stage.stage_deps)
    ]
    succ = graph.successors(m, stage.id)

    started = time.monotonic()
    inputs = handoff.collect_handoff(predecessors, retry_ms, timeout_ms)

    with tempfile.TemporaryDirectory(prefix=f"pallex-{m.app_id}-{stage.id}-") as scratch:
        paths = []
        for producer in sorted(inputs):
            path = Path(scratch) / f"{producer}.bin"
            path.write_bytes(inputs[producer])
            paths.append(str(path))
        env = dict(os.environ)
        env["PALLEX_INPUTS"] = ":".join(paths)
        env["PALLEX_RUNTIME_DIR"] = str(rt_dir)
        env["PALLEX_APP_ID"] = m.app_id
        env["PALLEX_STAGE_ID"] = stage.id
        logging.info("stage %s: running %s", stage.id, shlex.join(command))
        proc = subprocess.run(command, env=env, stdout=subprocess.PIPE, check=False)

    duration_ms = (time.monotonic() - started) * 1000
    if proc.returncode != 0:
        notify.publish_stage_event(
            config["mqtt"],
            notify.build_stage_event(
                m.app_id, stage.id, "error", list(inputs), 0, duration_ms, proc.returncode
            ),
        )
        raise PallexError(f"stage {stage.id}: command exited with status {proc.returncode}")

    payload = proc.stdout
    endpoint = handoff.HandoffEndpoint(m.app_id, stage.id, rt_dir, role="producer")
    handoff.serve_handoff(endpoint, payload, len(succ), timeout_ms)

    notify.publish_stage_event(
        config["mqtt"],
        notify.build_stage_event(
            m.app_id,
            stage.id,
            "done",
            list(inputs),
            len(payload),
            (time.monotonic() - started) * 1000,
            proc.returncode,
        ),
    )
    return 0


# --------------------
# Parser
# --------------------
def _add_simulation_args(p: argparse.ArgumentParser):
    p.add_argument("--units", type=Path, help="unit profile JSON")
    p.add_argument("--manifest", type=Path, help="application manifest JSON")
    p.add_argument("--stage-profiles", type=Path, help="stage profile JSON")
    p.add_argument(
        "--phases",
        default="rpi3",
        help="rpi3, rpizw, none or t_btl,t_knl,delay in ms (default: rpi3)",
    )
    p.add_argument(
        "--cores",
        type=parse_cores,
        default=1,
        help="number of cores or 'inf' (default: 1)",
    )
    p.add_argument(
        "--launch",
        choices=sim.LAUNCH_MODES,
        default="pallex",
        help="start stages per dependencies (pallex) or after all units (rc_local)",
    )


def build_argparser() -> argparse.ArgumentParser:
    examples = r"""
Examples:
  python -m pallex validate fixtures/fig8.json
  python -m pallex gen-units fixtures/fig8.json --output-dir /etc/systemd/system
  python -m pallex gen-config EU+NET1 > disable-units.sh
  python -m pallex simulate --units fixtures/blame.json --cores 4 --blame
  python -m pallex lifetime --mah 2400 --volt 5 --e 12 --n 6
  python -m pallex run-stage --app ic --stage s_cap --manifest fixtures/ic.json -- capture.sh
"""
    ap = argparse.ArgumentParser(
        prog="pallex",
        description="Stage graphs, unit generation, boot simulation and energy analysis for duty-cycled Linux devices.",
        epilog=examples,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("--config", type=Path, help="TOML config (default: $PALLEX_CONFIG)")
    ap.add_argument("--env-file", type=Path, help="KEY=VALUE file applied before the environment")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = ap.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("validate", help="check a manifest")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("graph", help="topological order, earliest starts, critical path")
    p.add_argument("manifest", type=Path)
    p.add_argument("--stage-profiles", type=Path, help="stage durations for earliest-start analysis")
    p.add_argument("--unit-ready", type=Path, help="JSON object unit -> ready time in ms")
    p.add_argument("--critical-path", action="store_true", help="append the critical path")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("gen-units", help="emit one systemd unit per stage")
    p.add_argument("manifest", type=Path)
    p.add_argument("--runtime-dir", help="PALLEX_RUNTIME_DIR written into the units")
    p.add_argument("--output-dir", type=Path, help="write files here instead of stdout")
    p.set_defaults(func=cmd_gen_units)

    p = sub.add_parser("gen-config", help="emit disable/mask commands for a unit profile")
    p.add_argument("profile", choices=unitgen.PROFILE_NAMES)
    p.add_argument("--catalog", type=Path, help="unit catalog JSON (default: shipped catalog)")
    p.add_argument("--groups", type=Path, help="unit group JSON (default: shipped groups)")
    p.set_defaults(func=cmd_gen_config)

    p = sub.add_parser("shutdown-cmd", help="print the shutdown command for a mode")
    p.add_argument("mode", choices=unitgen.SHUTDOWN_MODES)
    p.set_defaults(func=cmd_shutdown)

    p = sub.add_parser("simulate", help="simulate one boot and application run")
    _add_simulation_args(p)
    p.add_argument("--blame", action="store_true", help="print the blame CSV")
    p.add_argument("--gantt", action="store_true", help="print the Gantt CSV")
    p.add_argument("--compare", action="store_true", help="compare with launching after all units")
    p.add_argument("--power-out", type=Path, help="write a synthesized power trace CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("blame", help="simulate and print only the blame CSV")
    _add_simulation_args(p)
    p.set_defaults(func=cmd_blame)

    p = sub.add_parser("gantt", help="simulate and print only the Gantt CSV")
    _add_simulation_args(p)
    p.set_defaults(func=cmd_gantt)

    p = sub.add_parser("energy", help="integrate power traces")
    p.add_argument("traces", nargs="+", type=Path)
    p.add_argument("--window", type=parse_window, help="t0:t1 in µs")
    p.add_argument("--quantize", action="store_true", help="round V/I to 4 mV / 100 µA first")
    p.add_argument("--stream", action="store_true", help="integrate in chunks with constant memory")
    p.add_argument("--marker", type=Path, action="append", help="digital trace, once per power trace")
    p.add_argument("--pattern", help="marker bit pattern, e.g. 10101100")
    p.add_argument("--bit-period", type=int, help="marker bit period in µs")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("segment", help="energy per phase between boundaries")
    p.add_argument("trace", type=Path)
    p.add_argument("--boundaries", help="comma separated timestamps in µs")
    p.add_argument("--quantize", action="store_true")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("lifetime", help="battery lifetime in hours")
    p.add_argument("--mah", type=float, required=True, help="battery capacity in mAh")
    p.add_argument("--volt", type=float, required=True, help="battery voltage in V")
    p.add_argument("--e", type=float, help="energy per cycle in J")
    p.add_argument("--e-btl", type=float, help="bootloader energy in J")
    p.add_argument("--e-knl", type=float, help="kernel energy in J")
    p.add_argument("--e-user", type=float, help="userspace and application energy in J")
    p.add_argument("--e-sdn", type=float, help="shutdown energy in J")
    p.add_argument("--table", help="measured phases board/config/sdc/fill, e.g. rpi3/EU/slow/5")
    p.add_argument("--n", type=float, default=1, help="cycles per hour (default: 1)")
    p.add_argument("--sweep", type=parse_range, help="print hours for N in A:B")
    p.set_defaults(func=cmd_lifetime)

    p = sub.add_parser("run-stage", help="run one stage with blocking handoff")
    p.add_argument("--app", required=True)
    p.add_argument("--stage", required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--runtime-dir", help="socket directory (default: config or /run/pallex)")
    p.add_argument("--retry-ms", type=int, help="connect retry interval")
    p.add_argument("--timeout-ms", type=int, help="handoff timeout")
    p.add_argument("command", nargs=argparse.REMAINDER, help="-- command to wrap")
    p.set_defaults(func=cmd_run_stage)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_argparser()
    try:
        args = ap.parse_args(argv)
        if getattr(args, "marker", None) and getattr(args, "window", None):
            ap.error("--window cannot be combined with --marker")
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.verbose)
    try:
        if args.env_file:
            load_env_file(args.env_file)
        config = load_config(args.config)
        return args.func(args, config)
    except (PallexError, OSError, ValueError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1
