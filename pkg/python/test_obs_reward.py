import math
import unittest

import numpy as np

from config import RewardConfig, NoiseConfig
from ladder_terrain import generate_rough
from models import RobotModel, RobotState, ContactState, RewardBreakdown
from obs_reward import PROPRIO_LAYOUT, IMU_LAYOUT, SCAN_LAYOUT, PRIVILEGED_LAYOUT, STUDENT_LAYOUT, layout_size, \
    layout_ranges, layout_hash, ProprioHistory, height_scan, flat_flags, compute_goal, build_observations, \
    ladder_observation, noise_scales, add_noise, compute_rewards, constraint_costs, CONSTRAINT_FAMILIES
from planar_sim import PlanarSimulator
from test_utils import flat_terrain, ladder_terrain, resting_robot, goal_command


class TestLayouts(unittest.TestCase):

    def test_group_sizes(self):
        self.assertEqual(layout_size(PROPRIO_LAYOUT), 64)
        self.assertEqual(layout_size(IMU_LAYOUT), 48)
        self.assertEqual(layout_size(SCAN_LAYOUT), 200)
        self.assertEqual(layout_size(PRIVILEGED_LAYOUT), 74)
        self.assertEqual(layout_size(STUDENT_LAYOUT), 122)

    def test_ranges_are_contiguous(self):
        ranges = layout_ranges(STUDENT_LAYOUT)
        self.assertEqual(ranges["goal_direction"], (0, 3))
        self.assertEqual(ranges["imu"], (64, 112))
        self.assertEqual(ranges["ladder_pose"], (119, 122))

    def test_hash_tracks_scan_group(self):
        self.assertEqual(layout_hash(True), layout_hash(True))
        self.assertNotEqual(layout_hash(True), layout_hash(False))


class TestObservations(unittest.TestCase):

    def setUp(self):
        self.model = RobotModel()
        self.terrain = flat_terrain()
        self.state, self.contacts, _ = resting_robot(self.model, self.terrain, n=2)
        self.sim = PlanarSimulator(self.model, 2)

    def _observe(self, noise, rng=None, use_height_scan=True):
        terrains = [self.terrain] * 2
        scan = height_scan(self.state, terrains)
        goal = compute_goal(self.state, np.tile(self.terrain.goal_pose, (2, 1)), flat_flags(scan, RewardConfig()),
                            RewardConfig())
        return build_observations(self.model, self.state, self.contacts, goal, ProprioHistory(2), terrains,
                                  self.sim.randomization_record(), scan, noise, rng, use_height_scan)

    def test_group_shapes(self):
        obs = self._observe(NoiseConfig(), [np.random.default_rng(0), np.random.default_rng(1)])
        self.assertEqual(obs.proprio.shape, (2, 64))
        self.assertEqual(obs.imu.shape, (2, 48))
        self.assertEqual(obs.height_scan.shape, (2, 200))
        self.assertEqual(obs.privileged.shape, (2, 74))
        self.assertEqual(obs.student.shape, (2, 122))
        self.assertEqual(obs.layout_hash, layout_hash(True))

    def test_scan_can_be_dropped(self):
        obs = self._observe(None, use_height_scan=False)
        self.assertEqual(obs.height_scan.shape, (2, 0))
        self.assertIsNone(obs.student)
        self.assertEqual(obs.layout_hash, layout_hash(False))

    def test_disabled_noise_gives_clean_student_view(self):
        obs = self._observe(NoiseConfig(enabled=False), np.random.default_rng(0))
        np.testing.assert_array_equal(obs.student[:, :64], obs.proprio)
        np.testing.assert_array_equal(obs.student[:, 64:112], obs.imu)
        np.testing.assert_array_equal(obs.student[:, 112:], 0.0)

    def test_flat_ground_scan(self):
        scan = height_scan(self.state, [self.terrain] * 2)
        np.testing.assert_allclose(scan, -self.state.base_pos[0, 1])
        np.testing.assert_array_equal(flat_flags(scan, RewardConfig()), 1.0)

    def test_rough_ground_is_not_flat(self):
        rough = generate_rough(1.0, np.random.default_rng(9))
        state = RobotState.zeros(5)
        state.base_pos[:, 0] = [1.0, 2.0, 3.0, 4.0, 5.0]
        state.base_pos[:, 1] = 0.8
        scan = height_scan(state, [rough] * 5)
        self.assertLess(flat_flags(scan, RewardConfig()).sum(), 5.0)

    def test_ladder_observation(self):
        terrain = ladder_terrain(incline_deg=70.0, num_rungs=5)
        state = RobotState.zeros(2)
        state.base_pos[:] = [[0.2, 0.55], [0.2, 0.55]]
        ladder_state, pose = ladder_observation(state, [terrain, self.terrain])
        self.assertEqual(ladder_state[0, 0], 1.0)
        self.assertEqual(ladder_state[0, 6], 5)
        np.testing.assert_allclose(pose[0, :2], terrain.rung_centers[0] - state.base_pos[0])
        np.testing.assert_array_equal(ladder_state[1], 0.0)
        np.testing.assert_array_equal(pose[1], 0.0)

    def test_goal_in_base_frame(self):
        state = RobotState.zeros(2)
        state.pitch[1] = math.pi / 2
        goal = compute_goal(state, np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), np.ones(2), RewardConfig())
        np.testing.assert_allclose(goal.p_goal[0], [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(goal.p_goal[1], [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_array_equal(goal.at_goal, 0.0)
        close = compute_goal(state, np.array([[0.1, 0.0, 0.0]] * 2), np.ones(2), RewardConfig())
        np.testing.assert_array_equal(close.at_goal, 1.0)


class TestHistory(unittest.TestCase):

    def test_newest_first_and_reset(self):
        history = ProprioHistory(2)
        state = RobotState.zeros(2)
        for value in (1.0, 2.0):
            state.qd[:] = value
            history.push(state)
        self.assertTrue(history.cold.all())
        np.testing.assert_array_equal(history.joint_vel[:, 0], 2.0)
        np.testing.assert_array_equal(history.joint_vel[:, 1], 1.0)
        np.testing.assert_array_equal(history.joint_vel[:, 2], 0.0)
        history.push(state)
        self.assertFalse(history.cold.any())
        history.reset([1])
        np.testing.assert_array_equal(history.joint_vel[1], 0.0)
        np.testing.assert_array_equal(history.cold, [False, True])


class TestNoise(unittest.TestCase):

    def test_zero_scales_are_identity(self):
        clean = np.arange(12.0).reshape(3, 4)
        out = add_noise(clean, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, clean)
        self.assertIsNot(out, clean)

    def test_rows_draw_from_their_own_stream(self):
        clean = np.zeros((2, 5))
        a = add_noise(clean, 1.0, [np.random.default_rng(3), np.random.default_rng(4)])
        b = add_noise(clean, 1.0, [np.random.default_rng(3), np.random.default_rng(5)])
        np.testing.assert_array_equal(a[0], b[0])
        self.assertFalse(np.allclose(a[1], b[1]))

    def test_uniform_noise_bounded(self):
        out = add_noise(np.zeros((4, 1000)), 0.2, np.random.default_rng(1), "uniform")
        self.assertTrue(np.all(np.abs(out) <= 0.2))

    def test_ladder_flag_and_rung_count_stay_exact(self):
        ladder_state = np.array([[1.0, 2.0, 1.1, 0.3, 0.025, 1.2, 7.0]])
        scales = noise_scales(NoiseConfig(), ladder_state)
        start = layout_ranges(STUDENT_LAYOUT)["ladder_state"][0]
        self.assertEqual(scales[0, start], 0.0)
        self.assertEqual(scales[0, start + 6], 0.0)
        self.assertAlmostEqual(scales[0, start + 1], 0.05 * 2.0)
        self.assertEqual(scales[0, layout_ranges(STUDENT_LAYOUT)["goal_direction"][0]], 0.0)


class TestRewards(unittest.TestCase):
    """Each term against a hand-evaluated value on a minimal state."""

    def setUp(self):
        self.state = RobotState.zeros(1)
        self.contacts = ContactState.empty(1)
        self.q0 = np.zeros(8)

    def rewards(self, goal=None) -> RewardBreakdown:
        return compute_rewards(self.state, self.contacts, goal or goal_command(1), self.q0)

    def test_position_tracking(self):
        self.state.base_vel[0] = (0.5, 0.0)
        self.assertAlmostEqual(self.rewards().position_tracking[0], 1.5)
        self.state.base_vel[0] = (1.0, 0.0)
        self.assertAlmostEqual(self.rewards().position_tracking[0], 3.0 * (1.0 - 0.3 ** 2))
        self.assertAlmostEqual(self.rewards(goal_command(1, at_goal=1.0)).position_tracking[0], 4.5)

    def test_heading_and_base_motion(self):
        r = self.rewards(goal_command(1, p_goal=(0.0, 0.0, 0.0)))
        self.assertAlmostEqual(r.heading_tracking[0], 0.5)
        self.assertAlmostEqual(r.base_motion[0], 0.4)
        r = self.rewards(goal_command(1, p_goal=(1.0, 0.0, 0.0), heading=0.1))
        self.assertAlmostEqual(r.heading_tracking[0], 0.5 * math.exp(-0.1) * math.exp(-4.0))

    def test_joint_effort(self):
        self.state.tau[0, 0] = 10.0
        self.state.qd[0, 1] = 2.0
        self.state.qdd[0, 2] = 5.0
        self.assertAlmostEqual(self.rewards().joints[0], -0.001 - 0.004 - 0.001)

    def test_action_rate_and_smoothness(self):
        self.state.action_hist[0, 0, 0] = 1.0
        r = self.rewards()
        self.assertAlmostEqual(r.action_rate[0], -0.01)
        self.assertAlmostEqual(r.action_smoothness[0], -0.01)

    def test_foot_slippage_softer_on_slippery_ground(self):
        self.contacts.point_contact[0, 0] = True
        self.contacts.foot_velocity_b[0, 0] = (1.0, 0.0, 0.0)
        self.assertAlmostEqual(self.rewards().foot_slippage[0], -0.25)
        self.contacts.friction[0, 0] = 0.3
        self.assertAlmostEqual(self.rewards().foot_slippage[0], -0.05)

    def test_flat_orientation(self):
        self.state.pitch[0] = math.pi / 6
        self.assertAlmostEqual(self.rewards().flat_orientation[0], -0.25)
        self.assertAlmostEqual(self.rewards(goal_command(1, at_goal=1.0)).flat_orientation[0], -2.25)
        self.assertAlmostEqual(self.rewards(goal_command(1, flat=0.0)).flat_orientation[0], 0.0)

    def test_standing_terms(self):
        self.state.action_hist[0, 0, 0] = 0.2
        at_goal = goal_command(1, at_goal=1.0)
        r = self.rewards(at_goal)
        self.assertAlmostEqual(r.stand_still[0], -0.1)
        self.assertAlmostEqual(r.stand_still_contact[0], -2.0)
        self.contacts.point_contact[0, :4] = True
        self.assertAlmostEqual(self.rewards(at_goal).stand_still_contact[0], 0.0)
        self.assertEqual(self.rewards().stand_still[0], 0.0)

    def test_collisions(self):
        self.contacts.point_contact[0, 4] = True
        self.contacts.point_contact[0, 12] = True
        r = self.rewards()
        self.assertAlmostEqual(r.collision[0], -0.2)
        self.assertEqual(r.base_collision[0], 0.0)
        self.contacts.point_contact[0, 16] = True
        self.assertEqual(self.rewards().base_collision[0], -1.0)

    def test_total_is_sum_of_terms(self):
        self.state.base_vel[0] = (0.3, 0.1)
        self.state.pitch[0] = 0.2
        self.contacts.point_contact[0, [0, 5]] = True
        r = self.rewards(goal_command(1, at_goal=1.0))
        self.assertEqual(len(RewardBreakdown.names()), 12)
        self.assertAlmostEqual(r.total[0], sum(getattr(r, name)[0] for name in RewardBreakdown.names()))


class TestConstraintCosts(unittest.TestCase):

    def test_zero_inside_box(self):
        state = RobotState.zeros(1)
        costs = constraint_costs(state, RobotModel())
        self.assertEqual(costs.shape, (1, len(CONSTRAINT_FAMILIES)))
        np.testing.assert_array_equal(costs, 0.0)

    def test_hinge_per_family(self):
        state = RobotState.zeros(1)
        state.q[0, 0] = 2.5
        state.qd[0, 3] = -8.5
        state.tau_cmd[0, 5] = 90.0
        costs = constraint_costs(state, RobotModel())
        np.testing.assert_allclose(costs[0], [0.1, 1.0, 10.0], atol=1e-12)


if __name__ == "__main__":
    unittest.main()
