import unittest
import tempfile
import shutil
from pathlib import Path

import numpy as np

import config


class TestTrainConfig(unittest.TestCase):
    def test_defaults_are_valid(self):
        """Test that the default hyperparameters pass validation."""
        cfg = config.TrainConfig()
        self.assertEqual(cfg.validate(), [])
        self.assertEqual(cfg.minibatch_size, 32)
        self.assertEqual(cfg.iterations, 146)

    def test_every_error_is_reported(self):
        """Test that validation collects all offending fields at once."""
        cfg = config.TrainConfig(gamma=1.0, batch_size=100, minibatches=32, buffer_size=0, alpha=-1.0)
        errors = cfg.validate()
        self.assertEqual(len(errors), 4)
        self.assertTrue(any(e.startswith("train.gamma") for e in errors))
        self.assertTrue(any("not divisible" in e for e in errors))
        self.assertTrue(any(e.startswith("train.buffer_size") for e in errors))
        self.assertTrue(any(e.startswith("train.alpha") for e in errors))

    def test_vtrace_truncation_levels(self):
        cfg = config.TrainConfig(vtrace_rho=0.5, vtrace_c=1.0)
        self.assertEqual(len(cfg.validate()), 1)

    def test_early_stop_threshold(self):
        self.assertTrue(config.TrainConfig(early_stop_kl=0.0).validate())
        self.assertTrue(config.TrainConfig(early_stop_kl=float("nan")).validate())


class TestExperimentConfig(unittest.TestCase):
    def test_unknown_algorithm(self):
        cfg = config.ExperimentConfig(algorithm="trpo")
        self.assertIn("experiment.algorithm", cfg.validate()[0])

    def test_duplicate_seeds(self):
        cfg = config.ExperimentConfig(seeds=(1, 1))
        self.assertEqual(len(cfg.validate()), 1)

    def test_adaptive_flag_folds_into_train(self):
        cfg = config.ExperimentConfig(seeds=(3, 4), adaptive_epsilon=True)
        train = cfg.effective_train(4)
        self.assertEqual(train.seed, 4)
        self.assertEqual(train.epsilon_mode, "adaptive")
        self.assertEqual(cfg.train.epsilon_mode, "fixed")

    def test_without_grid_there_is_one_cell(self):
        cfg = config.ExperimentConfig()
        self.assertFalse(cfg.is_sweep)
        self.assertEqual(cfg.sweep_cells(), [("", cfg)])

    def test_grid_cells(self):
        cfg = config.ExperimentConfig(buffer_sizes=(1, 5), alphas=(0.01, 0.03))
        cells = cfg.sweep_cells()
        self.assertEqual([label for label, _ in cells], ["N1_alpha0.01", "N1_alpha0.03", "N5_alpha0.01", "N5_alpha0.03"])
        _, last = cells[-1]
        self.assertEqual((last.train.buffer_size, last.train.alpha), (5, 0.03))
        self.assertFalse(last.is_sweep)
        self.assertEqual(cfg.train.buffer_size, 5)

    def test_missing_axis_uses_the_train_value(self):
        cfg = config.ExperimentConfig(train=config.TrainConfig(alpha=0.1), buffer_sizes=(2, 3))
        self.assertEqual([c.train.alpha for _, c in cfg.sweep_cells()], [0.1, 0.1])
        self.assertEqual([label for label, _ in cfg.sweep_cells()], ["N2_alpha0.1", "N3_alpha0.1"])

    def test_invalid_grid(self):
        cfg = config.ExperimentConfig(buffer_sizes=(0, 2, 2), alphas=(-0.1,))
        errors = cfg.validate()
        self.assertEqual(len(errors), 2)
        self.assertTrue(any(e.startswith("experiment.buffer_sizes") for e in errors))
        self.assertTrue(any(e.startswith("experiment.alphas") for e in errors))
        self.assertEqual(len(config.ExperimentConfig(algorithm="ppo", alphas=(0.1,)).validate()), 1)


class TestParsing(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_parse_values(self):
        """Test typed parsing of both sections."""
        cfg = config.parse_config(
            "[train]\n"
            "env_id = pendulum\n"
            "batch_size = 256\n"
            "minibatches = 8\n"
            "hidden = 32, 16\n"
            "clip_epsilon = 0.05\n"
            "[experiment]\n"
            "algorithm = geppo\n"
            "seeds = 0 1 2\n"
            "disable_selection = yes\n"
            "buffer_sizes = 1, 3\n"
            "alphas = 0.01 0.1\n"
        )
        self.assertEqual(cfg.train.env_id, "pendulum")
        self.assertEqual(cfg.train.batch_size, 256)
        self.assertEqual(cfg.train.hidden, (32, 16))
        self.assertEqual(cfg.train.clip_epsilon, 0.05)
        self.assertEqual(cfg.algorithm, "geppo")
        self.assertEqual(cfg.seeds, (0, 1, 2))
        self.assertTrue(cfg.disable_selection)
        self.assertEqual(cfg.buffer_sizes, (1, 3))
        self.assertEqual(cfg.alphas, (0.01, 0.1))

    def test_dump_and_parse_round_trip(self):
        cfg = config.ExperimentConfig(
            train=config.TrainConfig(env_id="chain", learning_rate=1e-3, hidden=(8,)),
            algorithm="ppo",
            seeds=(5, 6),
        )
        self.assertEqual(config.parse_config(config.dump_config(cfg)), cfg)

    def test_grid_round_trip(self):
        cfg = config.ExperimentConfig(buffer_sizes=(2, 5), alphas=(0.003, 0.03))
        self.assertEqual(config.parse_config(config.dump_config(cfg)), cfg)

    def test_unknown_key(self):
        with self.assertRaises(config.ConfigError) as ctx:
            config.parse_config("[train]\nlearning_rat = 0.1\n")
        self.assertEqual(ctx.exception.errors, ["train.learning_rat: unknown key"])

    def test_unknown_section(self):
        with self.assertRaises(config.ConfigError):
            config.parse_config("[training]\nseed = 1\n")

    def test_unparseable_value(self):
        with self.assertRaises(config.ConfigError) as ctx:
            config.parse_config("[train]\nbatch_size = lots\n[experiment]\nadaptive_epsilon = maybe\n")
        self.assertEqual(len(ctx.exception.errors), 1)

    def test_invalid_values_raise(self):
        with self.assertRaises(config.ConfigError):
            config.parse_config("[train]\ngamma = 1.5\n")

    def test_load_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            config.load_config(Path(self.test_dir) / "nope.ini")

    def test_save_and_load(self):
        path = Path(self.test_dir) / "config.ini"
        cfg = config.ExperimentConfig(seeds=(0, 1))
        config.save_config(cfg, path)
        self.assertEqual(config.load_config(path), cfg)


class TestRngStreams(unittest.TestCase):
    def test_deterministic(self):
        a = config.rng_streams(7)
        b = config.rng_streams(7)
        self.assertEqual(list(a), list(config.RNG_STREAMS))
        for name in config.RNG_STREAMS:
            np.testing.assert_array_equal(a[name].random(5), b[name].random(5))

    def test_streams_are_independent(self):
        """Drawing from one stream leaves the others untouched."""
        a = config.rng_streams(7)
        b = config.rng_streams(7)
        a["rollout"].random(1000)
        np.testing.assert_array_equal(a["shuffle"].random(5), b["shuffle"].random(5))
        self.assertFalse(np.array_equal(a["env"].random(5), a["init"].random(5)))


if __name__ == "__main__":
    unittest.main()
