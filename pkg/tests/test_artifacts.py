import unittest
import json
import tempfile
import shutil
from pathlib import Path

import artifacts


class TestAtomicWrites(unittest.TestCase):
    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_json_write_leaves_no_temp_file(self):
        path = self.test_dir / "nested" / "summary.json"
        artifacts.atomic_write_json(path, {"b": 1, "a": [1.5]})
        self.assertEqual(json.loads(path.read_text()), {"a": [1.5], "b": 1})
        self.assertEqual([p.name for p in path.parent.iterdir()], ["summary.json"])

    def test_overwrite(self):
        path = self.test_dir / "config.ini"
        artifacts.atomic_write_text(path, "first")
        artifacts.atomic_write_text(path, "second")
        self.assertEqual(path.read_text(), "second")


class TestCsvStream(unittest.TestCase):
    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_header_only(self):
        path = self.test_dir / "metrics.csv"
        artifacts.CsvStream(path, ["a", "b"]).close()
        self.assertEqual(path.read_text(), "a,b\n")

    def test_missing_values_are_empty(self):
        """Test that None and NaN are written as empty cells."""
        path = self.test_dir / "metrics.csv"
        with artifacts.CsvStream(path, ["step", "mean_return", "eval_return"]) as stream:
            stream.write({"step": 1, "mean_return": float("nan"), "eval_return": None})
            stream.write({"step": 2, "mean_return": 0.1})
        fieldnames, rows = artifacts.read_csv(path)
        self.assertEqual(fieldnames, ["step", "mean_return", "eval_return"])
        self.assertEqual(rows[0], {"step": "1", "mean_return": "", "eval_return": ""})
        self.assertEqual(rows[1]["mean_return"], "0.1")

    def test_floats_round_trip_exactly(self):
        path = self.test_dir / "metrics.csv"
        value = 1.0 / 3.0
        with artifacts.CsvStream(path, ["x"]) as stream:
            stream.write({"x": value})
        _, rows = artifacts.read_csv(path)
        self.assertEqual(float(rows[0]["x"]), value)

    def test_rows_visible_before_close(self):
        path = self.test_dir / "metrics.csv"
        stream = artifacts.CsvStream(path, ["x"])
        stream.write({"x": 3})
        self.assertEqual(path.read_text(), "x\n3\n")
        stream.close()


class TestRunArtifacts(unittest.TestCase):
    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())
        self.run = artifacts.RunArtifacts(self.test_dir / "run")

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_recover_from_crash(self):
        """Test that leftover temp files from interrupted writes are removed."""
        self.run.ensure_directories()
        stale = self.run.out_dir / ("summary.json" + artifacts.TMP_SUFFIX)
        stale.write_text("{")
        removed = self.run.recover_from_crash()
        self.assertEqual(removed, [stale])
        self.assertFalse(stale.exists())

    def test_recover_without_directory(self):
        self.assertEqual(self.run.recover_from_crash(), [])

    def test_paths(self):
        self.assertEqual(self.run.metrics_path(3).name, "metrics_seed3.csv")
        self.assertEqual(self.run.selection_path(3).name, "selection_seed3.csv")
        self.assertEqual(self.run.snapshot_path(3).name, "snapshot_seed3.bin")

    def test_summary(self):
        self.run.prepare()
        self.assertIsNone(self.run.load_summary())
        self.run.write_summary({"mean": 1.5})
        self.assertEqual(self.run.load_summary(), {"mean": 1.5})

    def test_corrupt_summary(self):
        self.run.prepare()
        self.run.summary_path.write_text("{ not json")
        with self.assertRaises(ValueError):
            self.run.load_summary()

    def test_existing_metrics(self):
        self.run.prepare()
        for seed in (1, 0):
            artifacts.CsvStream(self.run.metrics_path(seed), ["x"]).close()
        self.assertEqual([p.name for p in self.run.existing_metrics()], ["metrics_seed0.csv", "metrics_seed1.csv"])


if __name__ == "__main__":
    unittest.main()
