# test_learner.py
"""
Unit tests for learner.py module.
Gradient check on a tiny net, clipping behavior, checkpoints, short training runs.
Set TREEBAND_SLOW=1 for the multi-seed efficacy run.
"""

import dataclasses
import os
import shutil
import tempfile
import unittest

import numpy as np

from config import AppConfig, TrainConfig
from learner import (
    Adam,
    Batch,
    CheckpointError,
    PolicyNet,
    act,
    batch_logp_and_values,
    collect_batch,
    greedy_build,
    load_checkpoint,
    loss_and_grad,
    masked_log_softmax,
    policy_forward,
    save_checkpoint,
    train,
    train_subset,
)
from metrics import fixed_decomposition
from rl_env import ActionSpec, EnvConfig, TreeBuildEnv, rollout
from ruleset import generate_synthetic, parse_ruleset, project
from tree import baseline_build, create_root

SLOW = bool(os.environ.get('TREEBAND_SLOW'))


def first_legal(observation, mask):
    dim, op = np.argwhere(mask)[0]
    return ActionSpec(int(dim), int(op))


def small_env(threshold=4):
    projected = project(generate_synthetic(1, 30), ['ip_proto', 'tp_src'])
    return TreeBuildEnv(projected, EnvConfig(leaf_threshold=threshold, max_steps=40))


def sample_batch(net, old_logp_shift=0.1, value_shift=0.5, seed=0):
    """Transitions of one episode; old log-probs and values offset from the current net."""
    env = small_env()
    record = rollout(env, first_legal)
    batch = Batch.from_transitions(record.transitions)
    logp, values = batch_logp_and_values(net, batch)
    rng = np.random.default_rng(seed)
    old_values = values + value_shift
    return dataclasses.replace(batch, old_logp=logp + old_logp_shift, old_values=old_values,
                               rewards=old_values + rng.normal(0.0, 1.0, size=batch.size))


def tiny_config(**train_overrides):
    config = AppConfig(leaf_threshold=4)
    config.train = TrainConfig(hidden_sizes=(16,), max_timesteps_total=200, max_timesteps_per_batch=50,
                               max_timesteps_per_rollout=50, minibatch=32, sgd_iters_per_batch=2,
                               plateau_patience=100, learning_rate=1e-3, num_workers=1)
    for key, value in train_overrides.items():
        setattr(config.train, key, value)
    return config


class TestPolicyHeads(unittest.TestCase):
    """Test masked distributions and action selection."""

    def test_masked_log_softmax(self):
        """Test probabilities sum to 1 and masked entries are exactly 0."""
        logits = np.array([[1.0, 2.0, 3.0, 4.0]])
        mask = np.array([[True, False, True, False]])
        probs = np.exp(masked_log_softmax(logits, mask))
        self.assertAlmostEqual(probs.sum(), 1.0, places=12)
        self.assertEqual(probs[0, 1], 0.0)
        self.assertEqual(probs[0, 3], 0.0)

    def test_all_masked_row(self):
        """Test a row with no legal entry is an error."""
        with self.assertRaises(ValueError):
            masked_log_softmax(np.zeros((1, 3)), np.zeros((1, 3), dtype=bool))

    def test_policy_forward_respects_mask(self):
        """Test illegal operations get no probability."""
        env = small_env()
        obs = env.reset()
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(0))
        out = policy_forward(net, obs)
        mask = env.action_mask(env.current_node)
        self.assertAlmostEqual(out.dim_probs.sum(), 1.0, places=12)
        self.assertTrue((out.op_probs[~mask[out.dim_choice]] == 0.0).all())

    def test_observation_shape_check(self):
        """Test wrong observation length."""
        net = PolicyNet.init(10, 1, (4,), np.random.default_rng(0))
        with self.assertRaises(ValueError):
            policy_forward(net, np.zeros(11))

    def test_act_is_seeded(self):
        """Test same seed, same actions."""
        env = small_env()
        obs = env.reset()
        mask = env.action_mask(env.current_node)
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(3))
        a = [act(net, obs, mask, np.random.default_rng(9))[0] for _ in range(3)]
        b = [act(net, obs, mask, np.random.default_rng(9))[0] for _ in range(3)]
        self.assertEqual(a, b)
        for action in a:
            self.assertTrue(mask[action.dim, action.op])

    def test_init_deterministic(self):
        """Test same seed, same parameters."""
        a = PolicyNet.init(20, 2, (8, 8), np.random.default_rng(5))
        b = PolicyNet.init(20, 2, (8, 8), np.random.default_rng(5))
        for name in a.params:
            self.assertTrue(np.array_equal(a.params[name], b.params[name]))

    def test_masked_probability_zero_over_rollouts(self):
        """Test masked dimensions and operations get probability exactly 0 at every visited node."""
        for i in range(10):
            rng = np.random.default_rng(700 + i)
            names = ['ip_proto', 'tp_src', 'tp_dst', 'nw_src'][:1 + i % 4]
            projected = project(generate_synthetic(i, 40), names)
            env = TreeBuildEnv(projected, EnvConfig(leaf_threshold=2, max_steps=60, partition_depth_limit=2))
            net = PolicyNet.init(env.observation_size, env.num_dims, (8,), rng)
            # extreme logits
            net.params['W_dim'] *= 50.0
            net.params['W_op'] *= 50.0

            def choose(observation, mask):
                legal_dims = mask.any(axis=1)
                for dim in np.flatnonzero(legal_dims):
                    out = policy_forward(net, observation, int(dim))
                    self.assertTrue((out.dim_probs[~legal_dims] == 0.0).all())
                    self.assertTrue((out.op_probs[~mask[dim]] == 0.0).all())
                action, logp, _ = act(net, observation, mask, rng)
                self.assertTrue(mask[action.dim, action.op])
                self.assertTrue(np.isfinite(logp))
                return action

            with self.subTest(episode=i, fields=names):
                record = rollout(env, choose)
                self.assertEqual(record.invalid_actions, 0)


class TestLoss(unittest.TestCase):
    """Test the clipped surrogate loss and its gradient."""

    def test_gradient_check(self):
        """Test analytic gradients against central differences."""
        env = small_env()
        env.reset()
        net = PolicyNet.init(env.observation_size, env.num_dims, (2,), np.random.default_rng(1))
        batch = sample_batch(net)
        config = TrainConfig()
        _, grads, _ = loss_and_grad(net, batch, config)

        h = 1e-5
        worst = 0.0
        for name, param in net.params.items():
            for index in np.ndindex(param.shape):
                saved = param[index]
                param[index] = saved + h
                plus, _, _ = loss_and_grad(net, batch, config, need_grad=False)
                param[index] = saved - h
                minus, _, _ = loss_and_grad(net, batch, config, need_grad=False)
                param[index] = saved
                numeric = (plus - minus) / (2 * h)
                analytic = grads[name][index]
                error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)
                worst = max(worst, error)
        self.assertLessEqual(worst, 1e-4)

    def test_clipped_ratio_has_no_policy_gradient(self):
        """Test ratio above 1 + eps with positive advantage."""
        env = small_env()
        env.reset()
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(2))
        batch = sample_batch(net, old_logp_shift=-1.0)
        batch = dataclasses.replace(batch, rewards=batch.old_values + 1.0)
        config = TrainConfig(entropy_coeff=0.0)
        _, grads, info = loss_and_grad(net, batch, config)
        self.assertEqual(info['clip_fraction'], 1.0)
        self.assertTrue(np.all(grads['W_dim'] == 0.0))
        self.assertTrue(np.all(grads['W_op'] == 0.0))

    def test_zero_advantage(self):
        """Test reward equal to the old value leaves no policy loss."""
        env = small_env()
        env.reset()
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(4))
        batch = sample_batch(net)
        batch = dataclasses.replace(batch, rewards=batch.old_values.copy())
        _, grads, info = loss_and_grad(net, batch, TrainConfig(entropy_coeff=0.0))
        self.assertEqual(info['policy_loss'], 0.0)
        self.assertTrue(np.all(grads['b_dim'] == 0.0))

    def test_many_adam_steps_stay_finite(self):
        """Test 1000 optimizer steps on one batch."""
        env = small_env()
        env.reset()
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(6))
        batch = sample_batch(net)
        config = TrainConfig()
        optimizer = Adam(1e-3)
        for _ in range(1000):
            _, grads, _ = loss_and_grad(net, batch, config)
            optimizer.step(net.params, grads)
        self.assertTrue(net.is_finite())
        self.assertEqual(optimizer.t, 1000)


class TestCheckpoint(unittest.TestCase):
    """Test policy checkpoints."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip_bit_identical(self):
        """Test every parameter survives byte for byte."""
        net = PolicyNet.init(30, 3, (8, 4), np.random.default_rng(7))
        path = save_checkpoint(os.path.join(self.temp_dir, 'policy.npz'), net, ('nw_src', 'tp_dst', 'in_port'), 'abc')
        again, meta = load_checkpoint(path)
        self.assertEqual(meta['subset'], ['nw_src', 'tp_dst', 'in_port'])
        self.assertEqual(meta['config_hash'], 'abc')
        self.assertEqual(again.hidden_sizes, (8, 4))
        for name, value in net.params.items():
            self.assertEqual(again.params[name].tobytes(), value.tobytes())
        self.assertFalse(os.path.exists(path + '.tmp'))

    def test_missing_file(self):
        """Test unreadable path."""
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.temp_dir, 'nope.npz'))

    def test_corrupt_file(self):
        """Test garbage bytes."""
        path = os.path.join(self.temp_dir, 'junk.npz')
        with open(path, 'wb') as f:
            f.write(b'not a checkpoint')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_foreign_npz(self):
        """Test an npz without metadata."""
        path = os.path.join(self.temp_dir, 'plain.npz')
        np.savez(path, W0=np.zeros((2, 2)))
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)


class TestTraining(unittest.TestCase):
    """Test short training runs."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.rules = generate_synthetic(0, 40)
        self.plan = fixed_decomposition('Random1')

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_best_objective_non_decreasing(self):
        """Test best-so-far curve and artifacts."""
        report = train(self.rules, self.plan, 'a', tiny_config(), out_dir=self.temp_dir)
        self.assertGreaterEqual(report.iterations, 1)
        best = list(report.curve['best_objective'])
        self.assertEqual(best, sorted(best))
        self.assertEqual(report.best_objective, best[-1])
        self.assertTrue(report.best_tree.is_complete())
        for name in ('policy_a.npz', 'curve_a.csv', 'best_tree_a.json', 'report_a.json'):
            self.assertTrue(os.path.exists(os.path.join(self.temp_dir, name)), name)

    def test_deterministic_per_seed(self):
        """Test two runs with one seed give the same curve."""
        a = train(self.rules, self.plan, 'b', tiny_config())
        b = train(self.rules, self.plan, 'b', tiny_config())
        self.assertEqual(a.mean_objectives, b.mean_objectives)
        self.assertEqual(a.best_objective, b.best_objective)

    def test_collection_independent_of_workers(self):
        """Test the batch does not depend on how many episodes run per wave."""
        projected = project(self.rules, self.plan.subset_a)
        env = TreeBuildEnv(projected, EnvConfig(leaf_threshold=4, max_steps=30))
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(0))
        env_config = env.config
        one = collect_batch(net, projected, env_config, TrainConfig(num_workers=1), 0, 80)
        three = collect_batch(net, projected, env_config, TrainConfig(num_workers=3), 0, 80)
        self.assertEqual([e.objective for e in one], [e.objective for e in three])
        self.assertEqual([e.steps for e in one], [e.steps for e in three])

    def test_root_leaf_needs_no_training(self):
        """Test a ruleset that fits one leaf."""
        rules = parse_ruleset("ip_proto=6 action=a\nip_proto=17 action=b\n")
        report = train_subset(project(rules, ['ip_proto']), tiny_config())
        self.assertEqual(report.iterations, 0)
        self.assertEqual(report.best_tree.stats.node_count, 1)
        self.assertEqual(report.stop_reason, 'root is a leaf')

    def test_greedy_build_complete(self):
        """Test greedy build from an untrained net finishes the tree."""
        env = small_env()
        env.reset()
        net = PolicyNet.init(env.observation_size, env.num_dims, (8,), np.random.default_rng(0))
        tree = greedy_build(net, env)
        self.assertTrue(tree.is_complete())

    @unittest.skipUnless(SLOW, "set TREEBAND_SLOW=1")
    def test_efficacy_against_baseline(self):
        """Test median best depth within one of the baseline over three seeds."""
        rules = generate_synthetic(21, 100)
        projected = project(rules, fixed_decomposition('Random1').subset_a)
        baseline = baseline_build(create_root(projected, 16)).stats.depth

        depths = []
        for seed in (0, 1, 2):
            config = AppConfig(seed=seed)
            config.train = TrainConfig(hidden_sizes=(64, 64), max_timesteps_total=60000,
                                       max_timesteps_per_batch=2000, minibatch=256,
                                       sgd_iters_per_batch=10, learning_rate=5e-4,
                                       plateau_patience=15, num_workers=1, seed=seed)
            report = train_subset(projected, config)
            best = list(report.curve['best_objective'])
            self.assertEqual(best, sorted(best))
            depths.append(report.best_tree.stats.depth)
        self.assertLessEqual(float(np.median(depths)), baseline + 1)


if __name__ == '__main__':
    unittest.main(verbosity=2)
