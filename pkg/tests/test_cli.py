import unittest
import sys
import json
import logging
import tempfile
import shutil
import subprocess
from pathlib import Path
from unittest.mock import patch

import cli
from artifacts import CsvStream, read_csv
from tabular_oracle import FUZZ_FIELDS
from trainer import METRICS_FIELDS

SMALL_CONFIG = """\
[train]
env_id = cartpole
total_timesteps = 128
batch_size = 64
minibatches = 4
epochs = 1
hidden = 8
eval_interval = 1
eval_episodes = 1

[experiment]
algorithm = toppo
seeds = 0, 1
"""


def _run(argv):
    """Run cli.main and return its exit code."""
    try:
        cli.main(argv)
    except SystemExit as e:
        return e.code
    raise AssertionError("cli.main returned without exiting")


class CLITestCase(unittest.TestCase):
    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        for handler in logging.getLogger().handlers[:]:
            handler.close()
            logging.getLogger().removeHandler(handler)
        shutil.rmtree(self.test_dir)


class TestEntryPoint(unittest.TestCase):
    def test_help_command(self):
        """Test that --help prints usage and exits with 0."""
        result = subprocess.run(
            [sys.executable, "cli.py", "--help"],
            capture_output=True,
            text=True
        )
        self.assertEqual(result.returncode, 0)
        self.assertIn("ToPPO optimization lab", result.stdout)

    def test_missing_command(self):
        self.assertEqual(_run([]), cli.EXIT_USAGE)
        self.assertEqual(_run(["train", "--algo", "trpo"]), cli.EXIT_USAGE)

    @patch('cli.handle_train')
    def test_train_command_dispatch(self, mock_train):
        """Verify 'train' calls the correct handler with the overrides."""
        mock_train.return_value = 0
        self.assertEqual(_run(["train", "--seed", "3", "--algo", "geppo", "--no-selection"]), 0)
        mock_train.assert_called_once()
        args = mock_train.call_args[0][0]
        self.assertEqual(args.seed, 3)
        self.assertEqual(args.algo, "geppo")
        self.assertTrue(args.no_selection)
        self.assertFalse(args.adaptive_eps)

    @patch('cli.handle_fuzz_bounds')
    def test_unexpected_exception_is_runtime_failure(self, mock_fuzz):
        mock_fuzz.side_effect = RuntimeError("boom")
        self.assertEqual(_run(["fuzz-bounds"]), cli.EXIT_RUNTIME)


class TestTrain(CLITestCase):
    def _config(self, text=SMALL_CONFIG):
        path = self.test_dir / "exp.ini"
        path.write_text(text)
        return path

    def test_overrides(self):
        args = cli.build_parser().parse_args(
            ["train", "--config", str(self._config()), "--seed", "4", "--out", "elsewhere", "--adaptive-eps"]
        )
        cfg = cli.experiment_from_args(args)
        self.assertEqual(cfg.seeds, (4,))
        self.assertEqual(cfg.out_dir, "elsewhere")
        self.assertTrue(cfg.adaptive_epsilon)
        self.assertEqual(cfg.train.batch_size, 64)

    def test_missing_config_file(self):
        self.assertEqual(_run(["train", "--config", str(self.test_dir / "none.ini")]), cli.EXIT_USAGE)

    def test_invalid_config(self):
        path = self._config("[train]\ngamma = 2\n")
        self.assertEqual(_run(["train", "--config", str(path)]), cli.EXIT_USAGE)

    def test_unknown_environment(self):
        path = self._config("[train]\nenv_id = mountaincar\n")
        out = self.test_dir / "run"
        self.assertEqual(_run(["train", "--config", str(path), "--out", str(out)]), cli.EXIT_USAGE)
        self.assertFalse(out.exists())

    def test_small_run_writes_artifacts(self):
        """Test the per-seed CSVs, snapshots and summary of a two-seed run."""
        out = self.test_dir / "run"
        self.assertEqual(_run(["train", "--config", str(self._config()), "--out", str(out)]), cli.EXIT_OK)

        for seed in (0, 1):
            fields, rows = read_csv(out / f"metrics_seed{seed}.csv")
            self.assertEqual(fields, METRICS_FIELDS)
            self.assertEqual([r["env_steps"] for r in rows], ["64", "128"])
            self.assertTrue((out / f"selection_seed{seed}.csv").exists())
            self.assertTrue((out / f"snapshot_seed{seed}.bin").exists())
        self.assertTrue((out / "config.ini").exists())
        self.assertTrue((out / "events.jsonl").exists())

        summary = json.loads((out / "summary.json").read_text())
        self.assertEqual(summary["seeds"], [0, 1])
        self.assertEqual(set(summary["final_returns"]), {"0", "1"})
        self.assertEqual(summary["env_steps"], {"0": 128, "1": 128})
        self.assertEqual(set(summary["wall_time_s"]), {"0", "1"})
        self.assertTrue(all(t > 0 for t in summary["wall_time_s"].values()))
        self.assertGreater(summary["mean_wall_time_s"], 0.0)

    def test_sweep_writes_one_directory_per_cell(self):
        path = self._config(SMALL_CONFIG + "buffer_sizes = 1, 3\nalphas = 0.03\n")
        out = self.test_dir / "sweep"
        self.assertEqual(_run(["train", "--config", str(path), "--seed", "0", "--out", str(out)]), cli.EXIT_OK)
        self.assertTrue((out / "config.ini").exists())
        for label, n in (("N1_alpha0.03", 1), ("N3_alpha0.03", 3)):
            summary = json.loads((out / label / "summary.json").read_text())
            self.assertEqual((summary["buffer_size"], summary["alpha"]), (n, 0.03))
            self.assertTrue((out / label / "metrics_seed0.csv").exists())
        self.assertFalse((out / "summary.json").exists())

        curves = self.test_dir / "curves.dat"
        self.assertEqual(_run(["plot-data", str(out), "--out", str(curves)]), cli.EXIT_OK)
        text = curves.read_text()
        self.assertIn("# N1_alpha0.03: toppo N=1 alpha=0.03", text)
        self.assertIn("# N3_alpha0.03: toppo N=3 alpha=0.03", text)
        self.assertEqual(len(text.split("\n\n")), 2)

    def test_rerun_is_identical(self):
        config = str(self._config())
        first, second = self.test_dir / "a", self.test_dir / "b"
        self.assertEqual(_run(["train", "--config", config, "--seed", "1", "--out", str(first)]), 0)
        self.assertEqual(_run(["train", "--config", config, "--seed", "1", "--out", str(second)]), 0)
        for name in ("metrics_seed1.csv", "selection_seed1.csv", "snapshot_seed1.bin"):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())


class TestFuzzBounds(CLITestCase):
    def test_zero_instances(self):
        out = self.test_dir / "fuzz.csv"
        self.assertEqual(_run(["fuzz-bounds", "--count", "0", "--out", str(out)]), cli.EXIT_OK)
        fields, rows = read_csv(out)
        self.assertEqual(fields, FUZZ_FIELDS)
        self.assertEqual(rows, [])

    def test_small_sweep(self):
        out = self.test_dir / "fuzz.csv"
        code = _run(["fuzz-bounds", "--count", "5", "--S", "3", "--A", "2", "--seed", "4", "--out", str(out)])
        self.assertEqual(code, cli.EXIT_OK)
        _, rows = read_csv(out)
        self.assertEqual([r["instance"] for r in rows], ["0", "1", "2", "3", "4"])
        self.assertTrue(all(r["violations"] == "0" for r in rows))

    def test_invalid_arguments(self):
        out = str(self.test_dir / "fuzz.csv")
        self.assertEqual(_run(["fuzz-bounds", "--count", "-1", "--out", out]), cli.EXIT_USAGE)
        self.assertEqual(_run(["fuzz-bounds", "--S", "1", "--out", out]), cli.EXIT_USAGE)
        self.assertEqual(_run(["fuzz-bounds", "--S", "9", "--A", "8", "--out", out]), cli.EXIT_USAGE)
        self.assertEqual(_run(["fuzz-bounds", "--gamma", "1", "--out", out]), cli.EXIT_USAGE)

    def test_violation_exit_code(self):
        row = {"violations": 1, "pdi_gap": 0.0, "l21_satisfied": False, "l21_lhs": -1.0, "l21_rhs": 0.0}
        with patch("cli.oracle.fuzz_instance", return_value=row), patch("cli.CsvStream"):
            with patch("cli.failed_checks", return_value=[("l21", -1.0)]):
                code = _run(["fuzz-bounds", "--count", "2", "--out", str(self.test_dir / "fuzz.csv")])
        self.assertEqual(code, cli.EXIT_VIOLATION)

    def test_failed_checks(self):
        row = {
            "pdi_gap": 0.0, "l21_satisfied": True, "l21_lhs": 0.0, "l21_rhs": 0.0,
            "l31_satisfied": False, "l31_lhs": -0.5, "l31_rhs": 0.25,
            "anchor_consistency_gap": 0.0, "ppo_holds": True, "ppo_value_after": 1.0, "ppo_value_before": 0.0,
            "visitation_lhs": 0.1, "visitation_rhs": 0.2, "advantage_lhs": 0.1, "advantage_rhs": 0.2,
            "improvement_anchor_gap": 0.0,
        }
        self.assertEqual(cli.failed_checks(row), [("l31", -0.75)])


class TestVtraceDemo(CLITestCase):
    def test_truncation_bias(self):
        rows = cli.vtrace_demo(0.01, 1.0)
        for row in rows:
            self.assertAlmostEqual(row["pi_rho_0"], 0.5, places=9)
            self.assertGreater(row["v_ratio"], 0.1)

    def test_on_policy_has_no_bias(self):
        for row in cli.vtrace_demo(0.01, 1.0, on_policy=True):
            self.assertAlmostEqual(row["v_ratio"], 0.0, places=9)

    def test_large_truncation_level_is_nearly_unbiased(self):
        for row in cli.vtrace_demo(0.01, 1e3):
            self.assertLess(row["v_ratio"], 1e-6)

    def test_command_writes_table(self):
        out = self.test_dir / "demo.csv"
        self.assertEqual(_run(["vtrace-demo", "--phi", "0.2", "--out", str(out)]), cli.EXIT_OK)
        fields, rows = read_csv(out)
        self.assertEqual(fields, cli.VTRACE_FIELDS)
        self.assertEqual(len(rows), 2)

    def test_invalid_phi(self):
        self.assertEqual(_run(["vtrace-demo", "--phi", "0", "--out", str(self.test_dir / "x.csv")]), cli.EXIT_USAGE)
        self.assertEqual(
            _run(["vtrace-demo", "--rho-bar", "0.5", "--out", str(self.test_dir / "x.csv")]), cli.EXIT_USAGE
        )


class TestPlotData(CLITestCase):
    def _curve(self, name, points, fields=("env_steps", "eval_return")):
        path = self.test_dir / name
        with CsvStream(path, fields) as stream:
            for step, value in points:
                stream.write({"env_steps": step, "eval_return": value})
        return path

    def test_single_file_has_zero_std(self):
        path = self._curve("a.csv", [(100, 1.0), (200, None), (300, 2.5)])
        self.assertEqual(cli.aggregate_curves([path]), [(100, 1.0, 0.0, 1), (300, 2.5, 0.0, 1)])

    def test_steps_common_to_all_files(self):
        a = self._curve("a.csv", [(100, 1.0), (200, 3.0)])
        b = self._curve("b.csv", [(100, 3.0), (200, 5.0), (300, 7.0)])
        self.assertEqual(cli.aggregate_curves([a, b]), [(100, 2.0, 1.0, 2), (200, 4.0, 1.0, 2)])

    def test_command_output(self):
        a = self._curve("a.csv", [(100, 1.0)])
        b = self._curve("b.csv", [(100, 3.0)])
        out = self.test_dir / "curve.dat"
        self.assertEqual(_run(["plot-data", str(a), str(b), "--out", str(out)]), cli.EXIT_OK)
        lines = out.read_text().splitlines()
        self.assertTrue(lines[0].startswith("#"))
        self.assertEqual(lines[1], "100 2.0 1.0 2")

    def test_schema_mismatch(self):
        a = self._curve("a.csv", [(100, 1.0)])
        b = self._curve("b.csv", [(100, 1.0)], fields=("env_steps", "eval_return", "kl"))
        self.assertEqual(_run(["plot-data", str(a), str(b)]), cli.EXIT_USAGE)

    def test_missing_file(self):
        self.assertEqual(_run(["plot-data", str(self.test_dir / "none.csv")]), cli.EXIT_USAGE)

    def test_run_directory_is_one_group(self):
        run = self.test_dir / "run"
        run.mkdir()
        for seed, value in ((0, 1.0), (1, 3.0)):
            with CsvStream(run / f"metrics_seed{seed}.csv", ("env_steps", "eval_return")) as stream:
                stream.write({"env_steps": 100, "eval_return": value})
        (run / "summary.json").write_text(json.dumps({"algorithm": "ppo", "buffer_size": 1, "alpha": 0.03}))
        groups = cli.curve_groups([run])
        self.assertEqual([(label, [p.name for p in files]) for label, files, _ in groups],
                         [("run", ["metrics_seed0.csv", "metrics_seed1.csv"])])
        self.assertEqual(groups[0][2]["algorithm"], "ppo")
        out = self.test_dir / "curve.dat"
        self.assertEqual(_run(["plot-data", str(run), "--out", str(out)]), cli.EXIT_OK)
        self.assertEqual(out.read_text().splitlines()[-1], "100 2.0 1.0 2")

    def test_directory_without_metrics(self):
        empty = self.test_dir / "empty"
        empty.mkdir()
        self.assertEqual(_run(["plot-data", str(empty)]), cli.EXIT_USAGE)

    def test_corrupt_summary(self):
        run = self.test_dir / "run"
        self._curve("run/metrics_seed0.csv", [(100, 1.0)])
        (run / "summary.json").write_text("{ nope")
        self.assertEqual(_run(["plot-data", str(run)]), cli.EXIT_USAGE)


if __name__ == "__main__":
    unittest.main()
