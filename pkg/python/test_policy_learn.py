import math
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from checkpoint import load_checkpoint
from config import TrainConfig
from errors import CheckpointError, LayoutMismatchError
from models import ObservationBundle, PolicyRole
from nn import Adam
from obs_reward import layout_hash
from policy_learn import PolicyNet, StudentNet, DistillSequence, ACTION_SCALE, compute_gae, discounted_cost_to_go, \
    make_batch, surrogate_gradient, barrier_terms, barrier_weight, ppo_ipo_update, threshold_schedule, \
    learning_rate, gaussian_log_prob, gaussian_entropy, distill_step, rollout_collect, make_envs, \
    teacher_input_sizes, train_teacher, resume_teacher, distill_student, load_teacher, load_student
from test_utils import numeric_gradients, small_train_config, small_run_config


def bandit_batch(net: PolicyNet, rng: np.random.Generator, n: int):
    """
    One-step problem on a constant input: a positive action pulls arm A (reward 1, cost 1), anything
    else arm B (reward 0.5, cost 0).
    """
    mean, log_std, value = net.forward({"proprio": np.ones((n, 1))})
    actions = mean + np.exp(log_std) * rng.standard_normal((n, 1))
    arm_a = actions[:, 0] > 0
    rewards = np.where(arm_a, 1.0, 0.5)
    costs = arm_a.astype(float)[:, None]
    logp = gaussian_log_prob(actions, mean, log_std)
    ends = np.ones((1, n), dtype=bool)
    return make_batch({"proprio": np.ones((1, n, 1))}, actions[None], logp[None], value[None], rewards[None], ends,
                      ~ends, np.zeros((1, n)), np.zeros(n), costs[None], gamma=0.0, lam=0.95)


def probability_of_a(net: PolicyNet) -> float:
    mean, log_std, _ = net.forward({"proprio": np.ones((1, 1))})
    z = float(mean[0, 0]) / math.exp(float(log_std[0, 0]))
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


class TestPolicyNet(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.config = small_train_config(imu_hidden=(5,), trunk_hidden=(6, 6))
        self.sizes = {"proprio": 3, "imu": 4, "privileged": 2}

    def test_gradients_match_finite_differences(self):
        net = PolicyNet(self.sizes, self.config, self.rng, num_actions=2)
        for _, value in net.named_parameters():
            value += 0.3 * self.rng.normal(size=value.shape)
        inputs = {name: self.rng.normal(size=(5, size)) for name, size in self.sizes.items()}
        wm, ws, wv = self.rng.normal(size=(5, 2)), self.rng.normal(size=(5, 2)), self.rng.normal(size=5)

        def loss():
            mean, log_std, value = net.forward(inputs)
            return float(np.sum(wm * mean) + np.sum(ws * log_std) + np.sum(wv * value))

        net.zero_grad()
        net.forward(inputs)
        net.backward(wm, ws, wv)
        numeric = numeric_gradients(net, loss)
        for name, grad in net.gradients().items():
            np.testing.assert_allclose(grad, numeric[name], rtol=1e-4, atol=1e-6, err_msg=name)

    def test_mean_is_bounded(self):
        net = PolicyNet(self.sizes, self.config, self.rng, num_actions=2)
        net.actor.params["weight"] *= 1e4
        inputs = {name: 10.0 * self.rng.normal(size=(20, size)) for name, size in self.sizes.items()}
        mean, log_std, value = net.forward(inputs)
        self.assertTrue(np.all(np.abs(mean) <= ACTION_SCALE))
        self.assertEqual(log_std.shape, mean.shape)
        self.assertEqual(value.shape, (20,))

    def test_layout_mismatch_refused(self):
        net = PolicyNet({"proprio": 3}, self.config, self.rng, layout="expected")
        bundle = ObservationBundle(proprio=np.zeros((1, 3)), imu=np.zeros((1, 0)), height_scan=np.zeros((1, 0)),
                                   privileged=np.zeros((1, 0)), student=None, layout_hash="other")
        with self.assertRaises(LayoutMismatchError):
            net.forward(bundle)


class TestStudentNet(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.config = small_train_config(imu_hidden=(5,), trunk_hidden=(6, 6), belief_hidden=4)
        self.student = StudentNet({"proprio": 3, "imu": 4, "ladder": 2}, 3, self.config, self.rng, num_actions=2)

    def test_sequence_gradients_match_finite_differences(self):
        student = self.student
        for _, value in student.named_parameters():
            value += 0.2 * self.rng.normal(size=value.shape)
        obs = self.rng.normal(size=(3, 2, 9))
        h0 = self.rng.normal(size=(2, 4))
        resets = np.zeros((3, 2))
        resets[1, 0] = 1.0
        wm, wd = self.rng.normal(size=(3, 2, 2)), self.rng.normal(size=(3, 2, 3))

        def loss():
            mean, decoded, _ = student.forward_sequence(obs, h0, resets)
            return float(np.sum(wm * mean) + np.sum(wd * decoded))

        student.zero_grad()
        student.forward_sequence(obs, h0, resets)
        student.backward_sequence(wm, wd)
        numeric = numeric_gradients(student, loss)
        for name, grad in student.gradients().items():
            np.testing.assert_allclose(grad, numeric[name], rtol=1e-4, atol=1e-6, err_msg=name)

    def test_act_matches_sequence(self):
        obs = self.rng.normal(size=(4, 3, 9))
        mean, _, beliefs = self.student.forward_sequence(obs, self.student.initial_state(3))
        hidden = self.student.initial_state(3)
        for t in range(4):
            step_mean, hidden = self.student.act(obs[t], hidden)
            np.testing.assert_allclose(step_mean, mean[t], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(hidden, beliefs[t], rtol=1e-10, atol=1e-12)

    def _sequence(self):
        obs = self.rng.normal(size=(4, 3, 9))
        return DistillSequence(obs=obs, h0=np.zeros((3, 4)), resets=np.zeros((4, 3)),
                               teacher_actions=self.rng.normal(size=(4, 3, 2)) * 0.1,
                               privileged=self.rng.normal(size=(4, 3, 3)))

    def test_zero_reconstruction_weight_leaves_decoder_untouched(self):
        optimizer = Adam(self.student.parameters(), 1e-2)
        decoder = {k: v.copy() for k, v in self.student.decoder.named_parameters()}
        trunk = {k: v.copy() for k, v in self.student.trunk.named_parameters()}
        for _ in range(3):
            distill_step(self.student, optimizer, self._sequence(), beta=0.0)
        for name, value in self.student.decoder.named_parameters():
            np.testing.assert_array_equal(value, decoder[name])
        self.assertTrue(any(not np.array_equal(v, trunk[k]) for k, v in self.student.trunk.named_parameters()))

        distill_step(self.student, optimizer, self._sequence(), beta=0.5)
        self.assertTrue(any(not np.array_equal(v, decoder[k]) for k, v in self.student.decoder.named_parameters()))

    def test_learns_a_linear_teacher(self):
        config = small_train_config(trunk_hidden=(32, 32), belief_hidden=8)
        student = StudentNet({"proprio": 4}, 2, config, np.random.default_rng(2), num_actions=2)
        optimizer = Adam(student.parameters(), 3e-3)
        rng = np.random.default_rng(3)

        def sequence():
            obs = rng.normal(size=(4, 16, 4))
            return DistillSequence(obs=obs, h0=np.zeros((16, 8)), resets=np.zeros((4, 16)),
                                   teacher_actions=0.3 * obs[..., :2], privileged=np.zeros((4, 16, 2)))

        for _ in range(1500):
            distill_step(student, optimizer, sequence(), beta=0.0)
        held_out = sequence()
        mean, _, _ = student.forward_sequence(held_out.obs, held_out.h0)
        self.assertLess(float(np.mean((mean - held_out.teacher_actions) ** 2)), 5e-3)

    def test_non_finite_loss_skips_update(self):
        optimizer = Adam(self.student.parameters(), 1e-2)
        before = {k: v.copy() for k, v in self.student.named_parameters()}
        seq = self._sequence()
        seq.teacher_actions[0, 0, 0] = np.nan
        stats = distill_step(self.student, optimizer, seq, beta=0.5)
        self.assertEqual(stats["skipped"], 1)
        self.assertEqual(optimizer.lr_scale, 0.5)
        for name, value in self.student.named_parameters():
            np.testing.assert_array_equal(value, before[name])


class TestAdvantages(unittest.TestCase):

    def test_gae_with_termination(self):
        rewards = np.ones((3, 1))
        values = np.full((3, 1), 0.5)
        terminated = np.array([[False], [True], [False]])
        timed_out = np.zeros((3, 1), dtype=bool)
        advantages, returns = compute_gae(rewards, values, terminated, timed_out, np.zeros((3, 1)),
                                          np.array([2.0]), gamma=0.9, lam=0.95)
        np.testing.assert_allclose(advantages[:, 0], [1.3775, 0.5, 2.3])
        np.testing.assert_allclose(returns, advantages + values)

    def test_gae_bootstraps_timeouts(self):
        rewards = np.ones((3, 1))
        values = np.full((3, 1), 0.5)
        terminated = np.zeros((3, 1), dtype=bool)
        timed_out = np.array([[False], [True], [False]])
        timeout_values = np.array([[0.0], [3.0], [0.0]])
        advantages, _ = compute_gae(rewards, values, terminated, timed_out, timeout_values, np.array([2.0]),
                                    gamma=0.9, lam=0.95)
        np.testing.assert_allclose(advantages[:, 0], [3.686, 3.2, 2.3])

    def test_cost_to_go_stops_at_episode_end(self):
        costs = np.ones((3, 1, 1))
        done = np.array([[False], [True], [False]])
        np.testing.assert_allclose(discounted_cost_to_go(costs, done, 0.5)[:, 0, 0], [1.5, 1.0, 1.0])

    def test_gaussian_helpers(self):
        actions = np.array([[0.5, -1.0]])
        mean = np.zeros((1, 2))
        log_std = np.log(np.array([[1.0, 2.0]]))
        expected = -0.5 * 0.25 - 0.5 * math.log(2 * math.pi) - 0.5 * 0.25 - math.log(2.0) - \
            0.5 * math.log(2 * math.pi)
        self.assertAlmostEqual(float(gaussian_log_prob(actions, mean, log_std)[0]), expected, places=12)
        self.assertAlmostEqual(float(gaussian_entropy(np.zeros((1, 1)))[0]),
                               0.5 * (math.log(2 * math.pi) + 1.0), places=12)


class TestSurrogateAndBarrier(unittest.TestCase):

    def test_clipped_samples_get_no_gradient(self):
        logp = np.log(np.array([1.5, 1.0, 0.5]))
        advantages = np.array([1.0, 2.0, 1.0])
        loss, grad = surrogate_gradient(logp, np.zeros(3), advantages, clip=0.2)
        self.assertAlmostEqual(loss, -(1.2 + 2.0 + 0.5) / 3, places=9)
        self.assertEqual(grad[0], 0.0)
        self.assertAlmostEqual(grad[1], -2.0 / 3, places=9)
        self.assertAlmostEqual(grad[2], -0.5 / 3, places=9)

    def test_barrier_is_continuous_at_the_margin(self):
        thresholds = np.array([0.5])
        m = 0.05 * 0.5
        below, d_below = barrier_terms(np.array([m - 1e-9]), thresholds, 0.05)
        above, d_above = barrier_terms(np.array([m + 1e-9]), thresholds, 0.05)
        self.assertAlmostEqual(float(below[0]), float(above[0]), places=6)
        self.assertAlmostEqual(float(d_below[0]), float(d_above[0]), delta=1e-3)
        phi, dphi = barrier_terms(np.array([-1.0, 0.3]), thresholds, 0.05)
        self.assertTrue(np.all(np.isfinite(phi)))
        self.assertAlmostEqual(float(phi[1]), math.log(0.3))
        self.assertAlmostEqual(float(dphi[0]), 1.0 / m)

    def test_barrier_weight(self):
        self.assertEqual(barrier_weight(TrainConfig(barrier_t=4.0)), 0.25)
        self.assertEqual(barrier_weight(TrainConfig(barrier_t=0.0)), 0.0)
        self.assertEqual(barrier_weight(TrainConfig(barrier_t=float("inf"))), 0.0)

    def _bandit_config(self, barrier_t: float, **kwargs) -> TrainConfig:
        values = dict(learning_rate=1e-2, entropy_coef=0.0, normalize_advantages=False, barrier_t=barrier_t,
                      update_epochs=4, mini_batches=4)
        values.update(kwargs)
        return small_train_config(**values)

    def test_barrier_off_variants_are_identical(self):
        nets = []
        for barrier_t in (0.0, float("inf")):
            config = self._bandit_config(barrier_t)
            net = PolicyNet({"proprio": 1}, config, np.random.default_rng(0), num_actions=1)
            optimizer = Adam(net.parameters(), config.learning_rate)
            batch = bandit_batch(net, np.random.default_rng(1), 64)
            stats = ppo_ipo_update(net, optimizer, batch, [0.5], config, np.random.default_rng(2))
            self.assertEqual(stats["barrier"], 0.0)
            nets.append(net)
        for (name, a), (_, b) in zip(nets[0].named_parameters(), nets[1].named_parameters()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_non_finite_loss_skips_and_halves_rate(self):
        config = self._bandit_config(0.0, mini_batches=2, update_epochs=1)
        net = PolicyNet({"proprio": 1}, config, np.random.default_rng(0), num_actions=1)
        optimizer = Adam(net.parameters(), config.learning_rate)
        batch = bandit_batch(net, np.random.default_rng(1), 8)
        batch.returns[:] = np.nan
        before = {k: v.copy() for k, v in net.named_parameters()}
        stats = ppo_ipo_update(net, optimizer, batch, [0.5], config, np.random.default_rng(2))
        self.assertEqual(stats["skipped"], 2)
        self.assertEqual(optimizer.lr_scale, 0.5)
        for name, value in net.named_parameters():
            np.testing.assert_array_equal(value, before[name])

    def _train_bandit(self, barrier_t: float, seed: int, threshold: float = 0.2, iterations: int = 250) -> PolicyNet:
        config = self._bandit_config(barrier_t)
        net = PolicyNet({"proprio": 1}, config, np.random.default_rng(seed), num_actions=1)
        optimizer = Adam(net.parameters(), config.learning_rate)
        rng = np.random.default_rng(100 + seed)
        for _ in range(iterations):
            ppo_ipo_update(net, optimizer, bandit_batch(net, rng, 256), [threshold], config, rng)
        return net

    @staticmethod
    def _violation_rate(net: PolicyNet, seed: int) -> float:
        """Share of sampled episodes that pull the costly arm."""
        return float(bandit_batch(net, np.random.default_rng(seed), 20000).cost_returns[0])

    def test_barrier_keeps_the_costly_arm_rare(self):
        for seed in range(5):
            with self.subTest(seed=seed):
                net = self._train_bandit(2.0, seed)
                self.assertLess(self._violation_rate(net, seed), 0.05)
                self.assertGreater(1.0 - probability_of_a(net), 0.9)

    def test_unconstrained_policy_prefers_the_rewarding_arm(self):
        for seed in range(5):
            with self.subTest(seed=seed):
                net = self._train_bandit(0.0, seed)
                self.assertGreater(self._violation_rate(net, seed), 0.3)
                self.assertGreater(probability_of_a(net), 0.7)


class TestSchedules(unittest.TestCase):

    def test_linear_thresholds(self):
        config = TrainConfig(threshold_start=(2.0, 2.0, 20.0), threshold_end=(0.1, 0.1, 1.0),
                             threshold_anneal_fraction=0.5)
        np.testing.assert_allclose(threshold_schedule(config, 0, 10), [2.0, 2.0, 20.0])
        np.testing.assert_allclose(threshold_schedule(config, 1, 10), [1.62, 1.62, 16.2])
        np.testing.assert_allclose(threshold_schedule(config, 5, 10), [0.1, 0.1, 1.0])
        np.testing.assert_allclose(threshold_schedule(config, 9, 10), [0.1, 0.1, 1.0])

    def test_performance_thresholds_tighten_only_when_met(self):
        config = TrainConfig(threshold_schedule="performance", threshold_anneal_fraction=0.3)
        current = threshold_schedule(config, 0, 10)
        np.testing.assert_allclose(current, config.threshold_start)
        updated = threshold_schedule(config, 0, 10, current, np.array([1.0, 3.0, 5.0]))
        np.testing.assert_allclose(updated, [2.0 - 1.9 / 3, 2.0, 20.0 - 19.0 / 3])
        for _ in range(20):
            updated = threshold_schedule(config, 0, 10, updated, np.zeros(3))
        np.testing.assert_allclose(updated, config.threshold_end)

    def test_learning_rate_decay(self):
        config = TrainConfig(learning_rate=1e-3)
        self.assertAlmostEqual(learning_rate(config, 0, 10), 1e-3)
        self.assertAlmostEqual(learning_rate(config, 5, 10), 5e-4)
        self.assertAlmostEqual(learning_rate(TrainConfig(lr_decay=False), 5, 10), 3e-4)
        self.assertAlmostEqual(learning_rate(config, 0, 1, base=0.1), 0.1)


class TestRollouts(unittest.TestCase):

    def setUp(self):
        self.config = small_run_config()
        self.net = PolicyNet(teacher_input_sizes(), self.config.train, np.random.default_rng(0),
                             layout=layout_hash(True))

    def test_batch_shapes(self):
        envs = make_envs(self.config, 4, 11)
        self.assertEqual([env.num_envs for env in envs], [2, 2])
        batch = rollout_collect(envs, self.net, 8, self.config.train)
        self.assertEqual(batch.size, 32)
        self.assertEqual(batch.actions.shape, (32, 8))
        self.assertEqual(batch.cost_advantages.shape, (32, 3))
        self.assertEqual(batch.cost_returns.shape, (3,))
        self.assertEqual(batch.inputs["height_scan"].shape[0], 32)
        self.assertTrue(np.all(np.isfinite(batch.advantages)))

    def test_worker_count_does_not_change_results(self):
        inline = rollout_collect(make_envs(self.config, 4, 11), self.net, 6, self.config.train, workers=1)
        pooled = rollout_collect(make_envs(self.config, 4, 11), self.net, 6, self.config.train, workers=2)
        np.testing.assert_array_equal(inline.actions, pooled.actions)
        np.testing.assert_array_equal(inline.returns, pooled.returns)
        np.testing.assert_array_equal(inline.cost_returns, pooled.cost_returns)

    def test_deterministic_rollout_uses_the_mean(self):
        envs = make_envs(self.config, 2, 11)
        obs = envs[0].last_obs
        mean = self.net.forward(self.net.inputs(obs))[0]
        batch = rollout_collect(envs, self.net, 1, self.config.train, deterministic=True)
        np.testing.assert_array_equal(batch.actions, mean)


class TestTrainingRuns(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_teacher_then_student(self):
        config = small_run_config()
        teacher_dir = os.path.join(self.tmp.name, "teacher")
        net, metrics = train_teacher(config, teacher_dir)
        self.assertEqual(len(metrics), config.train.epochs)
        self.assertTrue(os.path.exists(os.path.join(teacher_dir, "metrics.csv")))
        teacher_path = os.path.join(teacher_dir, "ckpt", "teacher.ckpt")
        checkpoint = load_checkpoint(teacher_path)
        self.assertEqual(checkpoint.role, PolicyRole.TEACHER)
        self.assertEqual(checkpoint.tensors["ipo.thresholds"].shape, (3,))
        loaded = load_teacher(teacher_path, expected_layout=layout_hash(True))
        for (name, a), (_, b) in zip(net.named_parameters(), loaded.named_parameters()):
            np.testing.assert_array_equal(a, b, err_msg=name)

        student_dir = os.path.join(self.tmp.name, "student")
        student, metrics = distill_student(config, teacher_path, student_dir)
        self.assertEqual(len(metrics), config.train.student_epochs)
        self.assertTrue(np.all(np.isfinite(metrics["imitation"])))
        loaded = load_student(os.path.join(student_dir, "ckpt", "student.ckpt"))
        for (name, a), (_, b) in zip(student.named_parameters(), loaded.named_parameters()):
            np.testing.assert_array_equal(a, b, err_msg=name)
        with self.assertRaises(CheckpointError):
            load_student(teacher_path)

    def test_resumed_run_matches_an_uninterrupted_one(self):
        config = small_run_config(epochs=3, checkpoint_every=1)
        full_dir = os.path.join(self.tmp.name, "full")
        full_net, full_metrics = train_teacher(config, full_dir)
        middle = os.path.join(full_dir, "ckpt", "teacher_00002.ckpt")
        self.assertTrue(os.path.exists(middle + ".envs"))
        self.assertIn("rng.3", load_checkpoint(middle).meta)

        resumed_net, resumed_metrics = train_teacher(config, os.path.join(self.tmp.name, "resumed"), resume=middle)
        self.assertEqual(list(resumed_metrics["iter"]), [2])
        pd.testing.assert_frame_equal(resumed_metrics, full_metrics.iloc[2:].reset_index(drop=True))
        for (name, a), (_, b) in zip(full_net.named_parameters(), resumed_net.named_parameters()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_resume_without_snapshot_restores_levels_and_streams(self):
        config = small_run_config(epochs=2, checkpoint_every=1)
        run_dir = os.path.join(self.tmp.name, "run")
        train_teacher(config, run_dir)
        first = os.path.join(run_dir, "ckpt", "teacher_00001.ckpt")
        os.remove(first + ".envs")
        checkpoint = load_checkpoint(first)
        net = PolicyNet(teacher_input_sizes(config.train.use_height_scan), config.train, np.random.default_rng(0),
                        layout=layout_hash(config.train.use_height_scan))
        optimizer = Adam(net.parameters(), config.train.learning_rate)
        start, thresholds, envs = resume_teacher(first, config, net, optimizer)
        self.assertEqual(start, 1)
        np.testing.assert_array_equal(thresholds, checkpoint.tensors["ipo.thresholds"])
        np.testing.assert_array_equal(np.concatenate([env.levels for env in envs]),
                                      checkpoint.tensors["curriculum.levels"])
        self.assertEqual(optimizer.t, int(checkpoint.tensors["adam.t"][0]))
        for name, value in net.named_parameters():
            np.testing.assert_array_equal(value, checkpoint.tensors[f"net.{name}"], err_msg=name)



if __name__ == "__main__":
    unittest.main()
