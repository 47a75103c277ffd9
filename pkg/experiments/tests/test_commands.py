import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, tag

from experiments.management.base import ExperimentCommand
from experiments.models import ExperimentRun

from .fixtures import FOUR_VERTEX_ARCS, FOUR_VERTEX_EDGES


def read_rows(path: Path) -> list[dict]:
    with path.open() as handle:
        first = handle.readline()
        assert first.startswith("# depo-lab "), first
        return list(csv.DictReader(handle))


def read_json(path: Path) -> dict:
    return json.loads(path.read_text())


class CommandTestCase(TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.addCleanup(self._tmp.cleanup)

    def run_command(self, name, out, **options):
        target = self.tmp / out
        call_command(name, out=str(target), stdout=StringIO(), stderr=StringIO(), **options)
        return target

    def write_config(self, name, document) -> str:
        path = self.tmp / name
        path.write_text(json.dumps(document))
        return str(path)

    def four_vertex_graph_file(self) -> str:
        return self.write_config("four.json", {"n": 4, "edges": FOUR_VERTEX_EDGES, "arcs": FOUR_VERTEX_ARCS})


class SimulateCommandTests(CommandTestCase):
    def test_complete_graph_grows_every_step(self):
        out = self.run_command("simulate", "k3", graph="K3", seed=1, horizon=30)
        rows = read_rows(out / "trajectory.csv")
        self.assertEqual(len(rows), 30)
        self.assertTrue(all(int(row["max_height"]) == int(row["t"]) for row in rows))
        summary = read_json(out / "summary.json")
        self.assertEqual(summary["trajectories"][0]["final_max_height"], 30)
        self.assertEqual(summary["provenance"]["seed"], 1)
        manifest = read_json(out / "manifest.json")
        self.assertEqual(manifest["command"], "simulate")
        self.assertIn({"path": "trajectory.csv", "kind": "trajectory"}, manifest["artifacts"])

    def test_same_seed_gives_identical_files(self):
        a = self.run_command("simulate", "a", graph="P4", seed=9, horizon=200, trajectories=2)
        b = self.run_command("simulate", "b", graph="P4", seed=9, horizon=200, trajectories=2)
        for name in ("trajectory_000.csv", "trajectory_001.csv", "summary.json"):
            self.assertEqual((a / name).read_bytes(), (b / name).read_bytes())
        self.assertNotEqual((a / "trajectory_000.csv").read_bytes(), (a / "trajectory_001.csv").read_bytes())

    def test_layer_trajectory_keeps_exclusion(self):
        out = self.run_command("simulate", "layer", graph="P4", driver="layer:k=2,rho=0.4", seed=3, horizon=150)
        summary = read_json(out / "summary.json")["trajectories"][0]
        self.assertTrue(summary["exclusion_holds"])
        self.assertTrue(summary["indicator_consistent"])

    def test_markov_trajectory_reports_order_tests(self):
        out = self.run_command(
            "simulate", "markov", graph=self.four_vertex_graph_file(), driver="markov", seed=5, horizon=300
        )
        summary = read_json(out / "summary.json")["trajectories"][0]
        self.assertIn("with_driver_min_p", summary["order_test"])

    def test_missing_seed_is_a_config_error(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command("simulate", "x", graph="K3", horizon=10)
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_non_lazy_driver_is_a_config_error(self):
        graph = self.write_config("loopless.json", {"n": 3, "edges": [[0, 1], [1, 2]], "arcs": [[0, 1], [1, 2], [2, 0]]})
        with self.assertRaises(CommandError) as ctx:
            self.run_command("simulate", "x", graph=graph, driver="markov", seed=1)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_run_is_recorded(self):
        self.run_command("simulate", "rec", graph="K3", seed=2, horizon=5)
        run = ExperimentRun.objects.get()
        self.assertEqual(run.command, "simulate")
        self.assertEqual(run.status, ExperimentRun.STATUS_DONE)
        self.assertEqual(run.verdict, "")
        self.assertEqual(run.artifacts.count(), 2)


class SolveCommandTests(CommandTestCase):
    def test_complete_graph_rate(self):
        out = self.run_command("solve", "k3", graph="K3", seed=1, depth_bound=12)
        document = read_json(out / "distribution.json")
        self.assertAlmostEqual(document["rate"]["value"], 1.0, places=9)
        self.assertEqual(document["rate"]["method"], "exact")
        self.assertAlmostEqual(sum(document["distribution"].values()), 1.0)
        states = read_json(out / "states.json")
        self.assertEqual(states["tail_index"], len(states["states"]))
        with (out / "transitions.coo").open() as handle:
            self.assertTrue(handle.readline().startswith("# depo-lab "))
            rows, cols, _ = (int(v) for v in handle.readline().split())
        self.assertEqual((rows, cols), (len(states["states"]), len(states["states"]) + 1))

    def test_single_vertex_falls_back_to_simulation(self):
        out = self.run_command("solve", "p1", graph="P1", seed=1, horizon=10, replicas=20)
        rate = read_json(out / "distribution.json")["rate"]
        self.assertEqual(rate["method"], "simulated")
        self.assertEqual(rate["value"], 1.0)

    def test_depth_bound_below_core_is_an_error(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command("solve", "p3", graph="P3", seed=1, depth_bound=1)
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(ExperimentRun.objects.get().status, ExperimentRun.STATUS_FAILED)

    def test_plots_and_no_matrix(self):
        out = self.run_command("solve", "p3", graph="P3", seed=1, horizon=50, plots=True, no_matrix=True)
        self.assertTrue((out / "tv_decay.png").exists())
        self.assertFalse((out / "transitions.coo").exists())


class RegenCommandTests(CommandTestCase):
    def test_compare_with_exact(self):
        out = self.run_command("regen", "k3", graph="K3", seed=4, cycles=300, depth_bound=20, compare=True)
        document = read_json(out / "distribution.json")
        self.assertEqual(document["regeneration"]["cycles"], 300)
        self.assertLess(document["comparison"]["tv_distance"], 0.5)
        self.assertAlmostEqual(document["summary"]["anchor_identity"], 1.0)


class CertifyCommandTests(CommandTestCase):
    def test_markov_replay(self):
        out = self.run_command("certify", "markov", graph=self.four_vertex_graph_file(), driver="markov", seed=1)
        document = read_json(out / "certificate.json")
        self.assertEqual(len(document["core"]), 4)
        self.assertTrue(all(row["mismatches"] == 0 for row in document["replay"]))
        self.assertEqual(document["certificate"]["driver_kind"], "markov")
        self.assertEqual(ExperimentRun.objects.get().verdict, "pass")

    def test_iid_certificate(self):
        out = self.run_command("certify", "p3", graph="P3", seed=1)
        cert = read_json(out / "certificate.json")["certificate"]
        self.assertEqual(cert["s"], 6)
        self.assertEqual(cert["killing_time"], 2)

    def test_layer_core_exclusion(self):
        out = self.run_command("certify", "layer", graph="P3", driver="layer:k=2,rho=0.3", seed=1)
        self.assertTrue(read_json(out / "certificate.json")["core_exclusion_holds"])


class CoupleCommandTests(CommandTestCase):
    def test_complete_graph_passes(self):
        out = self.run_command("couple", "k3", graph="K3", seed=2, pairs=4, runs=30, plots=True)
        document = read_json(out / "coupling.json")
        self.assertTrue(document["passed"])
        self.assertEqual(document["horizon"], 18)
        self.assertEqual([b["lag"] for b in document["blocks"]], [6, 12, 18])
        self.assertTrue((out / "coupling.png").exists())

    def test_inflated_certificate_fails_with_check_code(self):
        config = self.write_config("inflated.json", {"graph": "P3", "seed": 2, "certificate_scale": 1000})
        with self.assertRaises(CommandError) as ctx:
            self.run_command("couple", "p3", config=config, pairs=4, runs=100)
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertFalse(read_json(self.tmp / "p3" / "coupling.json")["coupling_passed"])
        self.assertEqual(ExperimentRun.objects.get().verdict, "fail")


class VerifyCommandTests(CommandTestCase):
    def test_inflated_certificate_fails(self):
        config = self.write_config("inflated.json", {"graph": "P3", "seed": 2, "certificate_scale": 1000})
        with self.assertRaises(CommandError) as ctx:
            self.run_command("verify", "p3", config=config, horizon=20, replicas=30, pairs=4, runs=20)
        self.assertEqual(ctx.exception.returncode, 1)
        verdict = read_json(self.tmp / "p3" / "verdict.json")
        self.assertEqual(verdict["verdict"], "fail")
        self.assertEqual(verdict["checks"]["certificate"]["status"], "fail")

    @tag("slow")
    def test_path_graph_passes(self):
        out = self.run_command("verify", "p3", graph="P3", seed=2, horizon=20, replicas=60, pairs=4, runs=30)
        verdict = read_json(out / "verdict.json")
        self.assertEqual(verdict["verdict"], "pass")
        self.assertEqual(verdict["checks"]["solve"]["status"], "pass")
        self.assertEqual(verdict["checks"]["certificate"]["status"], "pass")

    @tag("slow")
    def test_markov_driver(self):
        out = self.run_command(
            "verify", "markov", graph=self.four_vertex_graph_file(), driver="markov",
            seed=3, horizon=20, replicas=40, pairs=3, runs=20, depth_bound=6,
        )
        checks = read_json(out / "verdict.json")["checks"]
        self.assertEqual(checks["certificate"]["status"], "skipped")
        self.assertEqual(checks["solve"]["status"], "pass")

    @tag("slow")
    def test_layer_driver_runs_layer_checks(self):
        out = self.tmp / "layer"
        try:
            self.run_command(
                "verify", "layer", graph="P3", driver="layer:k=2,rho=0.1",
                seed=4, horizon=200, replicas=40, pairs=3, runs=20,
            )
        except CommandError as exc:
            self.assertEqual(exc.returncode, 1)
        checks = read_json(out / "verdict.json")["checks"]
        self.assertEqual(checks["exclusion"]["status"], "pass")
        self.assertIn("layer_convergence", checks)


class ExplodingCommand(ExperimentCommand):
    command_name = "explode"

    def run(self, experiment, context, **options):
        context.note("about to fail")
        raise ValueError("matrix is singular")


class UnexpectedErrorTests(CommandTestCase):
    def test_unexpected_error_marks_the_run_failed(self):
        with self.assertRaises(CommandError) as ctx:
            call_command(
                ExplodingCommand(), graph="K3", seed=1, out=str(self.tmp / "boom"),
                stdout=StringIO(), stderr=StringIO(),
            )
        self.assertEqual(ctx.exception.returncode, 2)
        run = ExperimentRun.objects.get()
        self.assertEqual(run.status, ExperimentRun.STATUS_FAILED)
        self.assertIn("about to fail", run.log)
        self.assertIn("matrix is singular", run.log)
