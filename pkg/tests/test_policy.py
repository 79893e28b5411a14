import math
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

import autodiff as ad
import policy as pol


def _zeroed(params: pol.PolicyParams) -> pol.PolicyParams:
    arrays = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    return params.replace_arrays(arrays, params.snapshot_id)


class TestDistribution(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_zero_weight_categorical_is_uniform(self):
        params = _zeroed(pol.init_policy(4, "categorical", 2, self.rng))
        dist = pol.distribution(params, np.ones(4))
        np.testing.assert_allclose(dist.probs, [[0.5, 0.5]])

    def test_zero_weight_gaussian_is_standard_normal(self):
        params = _zeroed(pol.init_policy(3, "gaussian", 1, self.rng))
        dist = pol.distribution(params, np.ones(3))
        np.testing.assert_array_equal(dist.mean, [[0.0]])
        np.testing.assert_array_equal(dist.std, [[1.0]])

    def test_probabilities_sum_to_one(self):
        params = pol.init_policy(4, "categorical", 3, self.rng)
        dist = pol.distribution(params, self.rng.normal(size=(50, 4)) * 10)
        np.testing.assert_allclose(dist.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_state_dimension_mismatch(self):
        params = pol.init_policy(4, "categorical", 2, self.rng)
        with self.assertRaises(pol.PolicyError):
            pol.distribution(params, np.ones(3))

    def test_non_finite_params_rejected(self):
        params = pol.init_policy(2, "categorical", 2, self.rng)
        arrays = dict(params.arrays)
        arrays["b0"] = np.full_like(arrays["b0"], np.nan)
        with self.assertRaises(pol.PolicyError):
            params.replace_arrays(arrays, 1)


class TestDensities(unittest.TestCase):
    def test_uniform_log_prob(self):
        dist = pol.ActionDistribution("categorical", probs=np.full((1, 4), 0.25))
        self.assertAlmostEqual(pol.log_prob(dist, np.array([2]))[0], math.log(0.25))

    def test_standard_normal_log_prob(self):
        dist = pol.ActionDistribution("gaussian", mean=np.zeros((1, 1)), std=np.ones((1, 1)))
        self.assertAlmostEqual(pol.log_prob(dist, np.zeros((1, 1)))[0], -0.5 * math.log(2 * math.pi))

    def test_categorical_log_prob(self):
        dist = pol.ActionDistribution("categorical", probs=np.array([[0.2, 0.8]]))
        self.assertAlmostEqual(pol.log_prob(dist, np.array([1]))[0], math.log(0.8))

    def test_action_out_of_support(self):
        dist = pol.ActionDistribution("categorical", probs=np.array([[0.2, 0.8]]))
        with self.assertRaises(pol.PolicyError):
            pol.log_prob(dist, np.array([2]))

    def test_kl_examples(self):
        p = pol.ActionDistribution("categorical", probs=np.array([[1.0, 0.0]]))
        q = pol.ActionDistribution("categorical", probs=np.array([[0.5, 0.5]]))
        self.assertAlmostEqual(pol.kl(p, q)[0], math.log(2.0))
        self.assertEqual(pol.kl(q, q)[0], 0.0)
        g0 = pol.ActionDistribution("gaussian", mean=np.zeros((1, 1)), std=np.ones((1, 1)))
        g1 = pol.ActionDistribution("gaussian", mean=np.ones((1, 1)), std=np.ones((1, 1)))
        self.assertAlmostEqual(pol.kl(g0, g1)[0], 0.5)

    def test_tv_examples(self):
        def cat(*rows):
            return pol.ActionDistribution("categorical", probs=np.array(rows))

        np.testing.assert_allclose(pol.tv(cat([1.0, 0.0]), cat([0.0, 1.0])), [1.0])
        np.testing.assert_allclose(pol.tv(cat([0.7, 0.3]), cat([0.4, 0.6])), [0.3])
        np.testing.assert_allclose(pol.tv(cat([0.7, 0.3]), cat([0.7, 0.3])), [0.0])

    def test_tv_is_categorical_only(self):
        g = pol.ActionDistribution("gaussian", mean=np.zeros((1, 1)), std=np.ones((1, 1)))
        with self.assertRaises(pol.PolicyError):
            pol.tv(g, g)

    def test_pinsker(self):
        rng = np.random.default_rng(5)
        p = pol.ActionDistribution("categorical", probs=rng.dirichlet(np.ones(3), size=1000))
        q = pol.ActionDistribution("categorical", probs=rng.dirichlet(np.ones(3), size=1000))
        self.assertTrue(np.all(pol.tv(p, q) <= np.sqrt(pol.kl(p, q) / 2.0) + 1e-12))

    def test_gaussian_sample_mean(self):
        rng = np.random.default_rng(9)
        n = 100_000
        dist = pol.ActionDistribution("gaussian", mean=np.full((n, 1), 0.7), std=np.full((n, 1), 2.0))
        samples = pol.sample(dist, rng)
        self.assertLess(abs(samples.mean() - 0.7), 4.0 * 2.0 / math.sqrt(n))

    def test_stacked_round_trip(self):
        dist = pol.ActionDistribution("gaussian", mean=np.array([[0.1, -0.2]]), std=np.array([[1.0, 0.5]]))
        back = pol.ActionDistribution.from_stacked("gaussian", dist.stacked())
        np.testing.assert_array_equal(back.mean, dist.mean)
        np.testing.assert_array_equal(back.std, dist.std)


class TestTapeConsistency(unittest.TestCase):
    def _check(self, family, act_dim, actions):
        rng = np.random.default_rng(1)
        params = pol.init_policy(3, family, act_dim, rng, hidden=(5,))
        states = rng.normal(size=(len(actions), 3))

        def objective(p):
            logp, _ = pol.log_prob_tensor(params, p, states, actions)
            return ad.sum(logp)

        value, grads = ad.value_and_grad(objective, params.arrays)
        expected = pol.log_prob(pol.distribution(params, states), actions).sum()
        self.assertAlmostEqual(value, expected, places=10)

        def numeric(arrays):
            return pol.log_prob(pol.distribution(params.replace_arrays(arrays, 0), states), actions).sum()

        self.assertLess(ad.relative_error(grads, ad.numerical_gradient(numeric, params.arrays)), 1e-4)

    def test_categorical_gradient(self):
        self._check("categorical", 3, np.array([0, 2, 1, 1]))

    def test_gaussian_gradient(self):
        self._check("gaussian", 2, np.array([[0.1, -0.3], [1.0, 0.0], [-0.5, 0.5]]))


class TestSnapshots(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_save_and_load(self):
        params = pol.init_policy(3, "gaussian", 1, np.random.default_rng(2), snapshot_id=7)
        path = Path(self.test_dir) / "snap.bin"
        pol.save_snapshot(params, path)
        loaded = pol.load_snapshot(path)
        self.assertEqual(loaded.snapshot_id, 7)
        self.assertEqual(loaded.family, "gaussian")
        for name, value in params.arrays.items():
            np.testing.assert_array_equal(loaded.arrays[name], value)

    def test_truncated_file(self):
        path = Path(self.test_dir) / "bad.bin"
        path.write_bytes(b"\x01\x02")
        with self.assertRaises(pol.PolicyError):
            pol.load_snapshot(path)

    def test_payload_cut_mid_value(self):
        params = pol.init_policy(2, "categorical", 2, np.random.default_rng(0), hidden=(4,))
        path = Path(self.test_dir) / "snap.bin"
        pol.save_snapshot(params, path)
        path.write_bytes(path.read_bytes()[:-3])
        with self.assertRaises(pol.PolicyError):
            pol.load_snapshot(path)


if __name__ == "__main__":
    unittest.main()
