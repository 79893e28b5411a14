import math
import unittest
from types import SimpleNamespace

import numpy as np

import autodiff as ad
import objectives as obj
import policy as pol


def _perturbed(params, rng, scale=0.3, snapshot_id=1):
    arrays = {k: v + scale * rng.normal(size=v.shape) for k, v in params.arrays.items()}
    return params.replace_arrays(arrays, snapshot_id)


def _minibatch(behavior, anchor, rng, n=16, obs_dim=4):
    """Samples drawn by ``behavior`` with anchor densities from ``anchor``."""
    states = rng.normal(size=(n, obs_dim))
    behavior_dist = pol.distribution(behavior, states)
    actions = pol.sample(behavior_dist, rng)
    anchor_dist = pol.distribution(anchor, states)
    return obj.Minibatch(
        family=behavior.family,
        states=states,
        actions=actions,
        advantages=rng.normal(size=n),
        targets=rng.normal(size=n),
        behavior_logp=pol.log_prob(behavior_dist, actions),
        anchor_logp=pol.log_prob(anchor_dist, actions),
        anchor_params=anchor_dist.stacked(),
    )


class TestClipBounds(unittest.TestCase):
    def test_toppo_floor_at_zero(self):
        bounds = obj.ClipBounds.toppo(np.array([0.1, 1.0, 2.0]), 0.2)
        np.testing.assert_allclose(bounds.lower, [0.0, 0.8, 1.8])
        np.testing.assert_allclose(bounds.upper, [0.3, 1.2, 2.2])
        self.assertEqual(bounds.validate(), [])

    def test_toppo_at_anchor_ratio_one_is_ppo(self):
        toppo = obj.ClipBounds.toppo(np.ones(3), 0.2)
        ppo = obj.ClipBounds.ppo(3, 0.2)
        np.testing.assert_array_equal(toppo.lower, ppo.lower)
        np.testing.assert_array_equal(toppo.upper, ppo.upper)

    def test_geppo_may_go_negative(self):
        bounds = obj.ClipBounds.geppo(np.array([0.1]), 0.2)
        self.assertLess(bounds.lower[0], 0.0)
        self.assertEqual(bounds.validate(), [])

    def test_validate_messages(self):
        inverted = obj.ClipBounds("ppo", np.array([1.2]), np.array([0.8]), 0.2)
        self.assertTrue(any("above" in e for e in inverted.validate()))
        wide = obj.ClipBounds("ppo", np.array([0.5]), np.array([1.5]), 0.2)
        self.assertTrue(any("wider" in e for e in wide.validate()))
        negative = obj.ClipBounds("toppo", np.array([-0.1]), np.array([0.1]), 0.2)
        self.assertTrue(any("negative" in e for e in negative.validate()))
        infinite = obj.ClipBounds("geppo", np.array([-np.inf]), np.array([0.1]), 0.2)
        self.assertTrue(any("non-finite" in e for e in infinite.validate()))

    def test_zero_incentive(self):
        bounds = obj.ClipBounds.ppo(4, 0.2)
        mask = obj.zero_incentive(np.array([1.5, 0.5, 1.5, 0.5]), np.array([1.0, -1.0, -1.0, 1.0]), bounds)
        np.testing.assert_array_equal(mask, [True, True, False, False])


class TestPolicyLosses(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.anchor = pol.init_policy(4, "categorical", 3, self.rng, hidden=(6,))

    def test_on_policy_toppo_equals_ppo(self):
        mb = _minibatch(self.anchor, self.anchor, self.rng, n=32)
        np.testing.assert_array_equal(mb.anchor_ratio, np.ones(32))
        live = _perturbed(self.anchor, self.rng, scale=1.0)
        a, grads_a = obj.toppo_loss(live, mb, 0.2, entropy_coef=0.01)
        b, grads_b = obj.ppo_loss(live, mb, 0.2, entropy_coef=0.01)
        self.assertEqual(a, b)
        for name in grads_a:
            np.testing.assert_array_equal(grads_a[name], grads_b[name])

    def test_toppo_gradient_matches_finite_differences(self):
        behavior = _perturbed(self.anchor, self.rng, scale=0.5)
        mb = _minibatch(behavior, self.anchor, self.rng)
        live = _perturbed(self.anchor, self.rng, scale=0.1, snapshot_id=2)

        _, grads = obj.toppo_loss(live, mb, 0.2)

        def loss(arrays):
            return obj.toppo_loss(live.replace_arrays(arrays, 2), mb, 0.2)[0].policy_loss

        numeric = ad.numerical_gradient(loss, live.arrays)
        self.assertLess(ad.relative_error(grads, numeric), 1e-4)

    def test_gaussian_gradient_matches_finite_differences(self):
        anchor = pol.init_policy(3, "gaussian", 2, self.rng, hidden=(5,))
        behavior = _perturbed(anchor, self.rng, scale=0.2)
        mb = _minibatch(behavior, anchor, self.rng, n=12, obs_dim=3)
        live = _perturbed(anchor, self.rng, scale=0.05, snapshot_id=2)

        _, grads = obj.geppo_loss(live, mb, 0.3, entropy_coef=0.01)

        def loss(arrays):
            return obj.geppo_loss(live.replace_arrays(arrays, 2), mb, 0.3, entropy_coef=0.01)[0].policy_loss

        numeric = ad.numerical_gradient(loss, live.arrays)
        self.assertLess(ad.relative_error(grads, numeric), 1e-4)

    def test_clipped_samples_have_no_gradient(self):
        mb = _minibatch(self.anchor, self.anchor, self.rng)
        # ratio 2 against behavior, positive advantages: the clipped branch wins everywhere
        mb = obj.Minibatch(
            family=mb.family, states=mb.states, actions=mb.actions,
            advantages=np.abs(mb.advantages) + 0.1, targets=mb.targets,
            behavior_logp=mb.behavior_logp - math.log(2.0),
            anchor_logp=mb.anchor_logp, anchor_params=mb.anchor_params,
        )
        breakdown, grads = obj.ppo_loss(self.anchor, mb, 0.2)
        self.assertEqual(breakdown.clip_fraction, 1.0)
        for value in grads.values():
            np.testing.assert_array_equal(value, np.zeros_like(value))

    def test_ratio_on_the_bound_keeps_the_unclipped_gradient(self):
        base = _minibatch(self.anchor, self.anchor, self.rng)
        exact_logp, _ = ad.forward(
            lambda _, p: pol.log_prob_tensor(self.anchor, p, base.states, base.actions)[0], [], self.anchor.arrays
        )
        mb = obj.Minibatch(
            family=base.family, states=base.states, actions=base.actions,
            advantages=np.abs(base.advantages) + 0.1, targets=base.targets,
            behavior_logp=exact_logp.value, anchor_logp=base.anchor_logp, anchor_params=base.anchor_params,
        )
        n = len(mb)
        on_upper = obj.ClipBounds("ppo", np.full(n, 0.8), np.ones(n), 0.1)
        _, grads = obj._clipped_surrogate(self.anchor, mb, on_upper)
        _, inside = obj.ppo_loss(self.anchor, mb, 0.2)
        self.assertGreater(sum(float(np.abs(g).sum()) for g in grads.values()), 0.0)
        for name in grads:
            np.testing.assert_allclose(grads[name], inside[name], atol=1e-12)

    def test_kl_to_anchor(self):
        mb = _minibatch(self.anchor, self.anchor, self.rng)
        breakdown, _ = obj.toppo_loss(self.anchor, mb, 0.2)
        self.assertAlmostEqual(breakdown.kl, 0.0, places=12)
        self.assertEqual(breakdown.clip_fraction, 0.0)
        moved, _ = obj.toppo_loss(_perturbed(self.anchor, self.rng, scale=1.0), mb, 0.2)
        self.assertGreater(moved.kl, 0.0)

    def test_non_finite_ratio_is_excluded(self):
        mb = _minibatch(self.anchor, self.anchor, self.rng, n=8)
        behavior_logp = mb.behavior_logp.copy()
        behavior_logp[3] = -np.inf
        broken = obj.Minibatch(
            family=mb.family, states=mb.states, actions=mb.actions, advantages=mb.advantages,
            targets=mb.targets, behavior_logp=behavior_logp,
            anchor_logp=mb.anchor_logp, anchor_params=mb.anchor_params,
        )
        breakdown, _ = obj.ppo_loss(self.anchor, broken, 0.2)
        self.assertEqual(breakdown.excluded, 1)
        rest = np.array([0, 1, 2, 4, 5, 6, 7])
        expected, _ = obj.ppo_loss(self.anchor, mb.take(rest), 0.2)
        self.assertAlmostEqual(breakdown.policy_loss, expected.policy_loss, places=12)

    def test_everything_excluded(self):
        mb = _minibatch(self.anchor, self.anchor, self.rng, n=2)
        broken = obj.Minibatch(
            family=mb.family, states=mb.states, actions=mb.actions, advantages=mb.advantages,
            targets=mb.targets, behavior_logp=np.full(2, -np.inf),
            anchor_logp=mb.anchor_logp, anchor_params=mb.anchor_params,
        )
        with self.assertRaises(obj.ObjectiveError):
            obj.ppo_loss(self.anchor, broken, 0.2)

    def test_bounds_must_cover_the_minibatch(self):
        mb = _minibatch(self.anchor, self.anchor, self.rng, n=4)
        with self.assertRaises(obj.ObjectiveError):
            obj._clipped_surrogate(self.anchor, mb, obj.ClipBounds.ppo(5, 0.2))


class TestMinibatch(unittest.TestCase):
    def test_concat_rejects_mixed_families(self):
        rng = np.random.default_rng(1)
        cat = pol.init_policy(3, "categorical", 2, rng, hidden=(4,))
        gauss = pol.init_policy(3, "gaussian", 2, rng, hidden=(4,))
        with self.assertRaises(obj.ObjectiveError):
            obj.Minibatch.concat([_minibatch(cat, cat, rng, obs_dim=3), _minibatch(gauss, gauss, rng, obs_dim=3)])

    def test_concat_preserves_order(self):
        rng = np.random.default_rng(2)
        params = pol.init_policy(3, "categorical", 2, rng, hidden=(4,))
        a, b = _minibatch(params, params, rng, n=3, obs_dim=3), _minibatch(params, params, rng, n=2, obs_dim=3)
        joined = obj.Minibatch.concat([a, b])
        self.assertEqual(len(joined), 5)
        np.testing.assert_array_equal(joined.advantages, np.concatenate([a.advantages, b.advantages]))

    def test_empty_concat(self):
        with self.assertRaises(obj.ObjectiveError):
            obj.Minibatch.concat([])


class TestValueLoss(unittest.TestCase):
    def test_zero_network_is_mean_square_target(self):
        vparams = pol.init_value(2, np.random.default_rng(0), hidden=(3,))
        zeroed = vparams.replace_arrays({k: np.zeros_like(v) for k, v in vparams.arrays.items()})
        batch = SimpleNamespace(states=np.ones((3, 2)), targets=np.array([1.0, 2.0, 3.0]))
        loss, _ = obj.value_loss(zeroed, batch)
        self.assertAlmostEqual(loss, 14.0 / 3.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        vparams = pol.init_value(3, rng, hidden=(4,))
        batch = SimpleNamespace(states=rng.normal(size=(10, 3)), targets=rng.normal(size=10))
        _, grads = obj.value_loss(vparams, batch)
        numeric = ad.numerical_gradient(lambda a: obj.value_loss(vparams.replace_arrays(a), batch)[0], vparams.arrays)
        self.assertLess(ad.relative_error(grads, numeric), 1e-5)

    def test_needs_targets(self):
        vparams = pol.init_value(2, np.random.default_rng(0), hidden=(3,))
        with self.assertRaises(obj.ObjectiveError):
            obj.value_loss(vparams, SimpleNamespace(states=np.ones((1, 2)), targets=None))


if __name__ == "__main__":
    unittest.main()
