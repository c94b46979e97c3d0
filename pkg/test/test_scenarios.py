import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from io import StringIO
from pathlib import Path
from unittest import mock

from pallex.cli import main

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"

# image classification variants shipped as example manifests
SCENARIOS = ("ic", "ic_c", "ic_e", "ic_u1", "ic_u2", "ic_u3")
GOLDEN = ("ic_u1", "ic_u2", "ic_u3")
RPI3_PHASES_MS = 3650 + 2850


def run_cli(*argv) -> tuple[int, str, str]:
    out, err = StringIO(), StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def metrics(out: str) -> dict[str, float]:
    rows = [line.split(",") for line in out.splitlines()[1:] if line]
    return {key: float(value) for key, value in rows}


class ScenarioTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        env = mock.patch.dict(os.environ, {}, clear=True)
        env.start()
        self.addCleanup(env.stop)

    def tearDown(self):
        self.tmp.cleanup()

    def simulate(self, app: str, cores: str) -> dict[str, float]:
        code, out, err = run_cli(
            "simulate",
            "--units",
            FIXTURES / "rpi3-units.json",
            "--manifest",
            FIXTURES / f"{app}.json",
            "--stage-profiles",
            FIXTURES / "scenario-stages.json",
            "--phases",
            "rpi3",
            "--cores",
            cores,
            "--compare",
        )
        self.assertEqual(code, 0, err)
        return metrics(out)

    def test_every_manifest_validates(self):
        for app in SCENARIOS:
            with self.subTest(app=app):
                self.assertEqual(run_cli("validate", FIXTURES / f"{app}.json")[:2], (0, "ok\n"))

    def test_every_manifest_simulates(self):
        for app in SCENARIOS:
            for cores in ("1", "4", "inf"):
                with self.subTest(app=app, cores=cores):
                    result = self.simulate(app, cores)
                    self.assertGreaterEqual(result["pallex_total_ms"], RPI3_PHASES_MS)
                    self.assertGreaterEqual(result["baseline_total_ms"], RPI3_PHASES_MS)

    def test_dependency_launch_never_slower_with_unbounded_cores(self):
        for app in SCENARIOS:
            with self.subTest(app=app):
                result = self.simulate(app, "inf")
                self.assertLessEqual(result["pallex_total_ms"], result["baseline_total_ms"])
                self.assertGreaterEqual(result["improvement_pct"], 0)

    def test_more_captures_take_longer(self):
        totals = [self.simulate(app, "inf")["pallex_total_ms"] for app in ("ic_u1", "ic_u2", "ic_u3")]
        self.assertEqual(totals, sorted(totals))

    def test_gen_units_matches_golden(self):
        for app in GOLDEN:
            with self.subTest(app=app):
                out_dir = self.dir / app
                code, _, err = run_cli(
                    "gen-units",
                    FIXTURES / f"{app}.json",
                    "--runtime-dir",
                    "/run/pallex",
                    "--output-dir",
                    out_dir,
                )
                self.assertEqual(code, 0, err)
                golden = FIXTURES / "golden" / app
                written = sorted(out_dir.iterdir())
                self.assertEqual([p.name for p in written], sorted(p.name for p in golden.iterdir()))
                for path in written:
                    self.assertEqual(path.read_bytes(), (golden / path.name).read_bytes())

    def test_stage_only_dependencies_stay_out_of_units(self):
        for app in ("ic_c", "ic_e"):
            with self.subTest(app=app):
                code, out, _ = run_cli("gen-units", FIXTURES / f"{app}.json", "--runtime-dir", "/run/pallex")
                self.assertEqual(code, 0)
                self.assertNotIn("Requires=", out)
                self.assertNotIn("After=", out)
                self.assertIn("Description=Pallex stage", out)

    def test_synthesized_power_for_every_manifest(self):
        for app in SCENARIOS:
            with self.subTest(app=app):
                power = self.dir / f"{app}-power.csv"
                code, _, err = run_cli(
                    "simulate",
                    "--units",
                    FIXTURES / "rpi3-units.json",
                    "--manifest",
                    FIXTURES / f"{app}.json",
                    "--stage-profiles",
                    FIXTURES / "scenario-stages.json",
                    "--cores",
                    "4",
                    "--power-out",
                    power,
                )
                self.assertEqual(code, 0, err)
                code, out, _ = run_cli("energy", power)
                self.assertEqual(code, 0)
                self.assertGreater(float(out.split(",")[1]), 0)
