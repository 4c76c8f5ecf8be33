import dataclasses
import math
import os
import tempfile
import unittest

import numpy as np

from errors import InvalidSpecError
from ladder_terrain import validate_ladder_spec, generate_ladder, generate_rough, level_parameters, curriculum_sample, \
    curriculum_update, sample_eval_ladders, rungs_for_length, terrain_height, is_locally_flat, dump_terrain, \
    read_terrain_header, TerrainBatch, MIN_FOOT_CLEARANCE, MAX_PLATFORM_OFFSET
from models import CurriculumSchedule, CurriculumState, EpisodeOutcome, TerrainKind
from test_utils import ladder_spec, ladder_terrain, flat_terrain


class TestLadderSpecValidation(unittest.TestCase):

    def test_valid_spec_passes(self):
        validate_ladder_spec(ladder_spec())

    def test_single_rung_rejected(self):
        spec = dataclasses.replace(ladder_spec(), num_rungs=1)
        with self.assertRaises(InvalidSpecError) as ctx:
            validate_ladder_spec(spec)
        self.assertEqual(ctx.exception.bound, "num_rungs >= 2")

    def test_rungs_must_fit_length(self):
        spec = dataclasses.replace(ladder_spec(num_rungs=6, spacing=0.3), length_m=1.0)
        with self.assertRaises(InvalidSpecError) as ctx:
            validate_ladder_spec(spec)
        self.assertIn("length_m", ctx.exception.bound)

    def test_major_radius_below_minor_rejected(self):
        spec = dataclasses.replace(ladder_spec(radius=0.03), rung_major_radius_m=0.02)
        with self.assertRaises(InvalidSpecError):
            validate_ladder_spec(spec)

    def test_incline_range(self):
        for incline in (0.0, -0.1, math.pi / 2 + 0.1):
            with self.assertRaises(InvalidSpecError):
                validate_ladder_spec(dataclasses.replace(ladder_spec(), incline_rad=incline))
        validate_ladder_spec(dataclasses.replace(ladder_spec(), incline_rad=math.pi / 2))

    def test_platform_offset_range(self):
        with self.assertRaises(InvalidSpecError):
            validate_ladder_spec(ladder_spec(offset=0.2))
        with self.assertRaises(InvalidSpecError):
            validate_ladder_spec(ladder_spec(offset=-0.01))

    def test_invalid_spec_is_a_value_error(self):
        with self.assertRaises(ValueError):
            validate_ladder_spec(dataclasses.replace(ladder_spec(), spacing_m=0.0))


class TestGenerateLadder(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_rungs_follow_incline_at_spacing(self):
        spec = ladder_spec(incline_deg=60.0, spacing=0.3, num_rungs=5)
        terrain = generate_ladder(spec, self.rng)
        self.assertEqual(terrain.kind, TerrainKind.LADDER)
        self.assertEqual(len(terrain.rung_centers), 5)
        steps = np.diff(terrain.rung_centers, axis=0)
        np.testing.assert_allclose(np.linalg.norm(steps, axis=1), 0.3)
        np.testing.assert_allclose(steps / 0.3, np.tile([math.cos(math.radians(60)), math.sin(math.radians(60))],
                                                        (4, 1)), atol=1e-12)

    def test_platform_leaves_foot_clearance(self):
        for incline in (45.0, 70.0, 90.0):
            for offset in (0.0, 0.1):
                spec = ladder_spec(incline_deg=incline, offset=offset)
                terrain = generate_ladder(spec, self.rng)
                top = terrain.rung_centers[-1]
                self.assertGreaterEqual(terrain.platform_height_m - top[1], MIN_FOOT_CLEARANCE - 1e-12)
                self.assertLessEqual(terrain.platform_height_m - top[1], spec.spacing_m + 1e-12)
                self.assertGreaterEqual(terrain.platform_lip_x - top[0],
                                        spec.rung_major_radius_m + MIN_FOOT_CLEARANCE + offset - 1e-12)

    def test_goal_lies_on_platform(self):
        terrain = ladder_terrain(incline_deg=80.0)
        goal_x, goal_z, _ = terrain.goal_pose
        self.assertGreater(goal_x, terrain.platform_lip_x)
        self.assertGreater(goal_z, terrain.platform_height_m)
        self.assertAlmostEqual(float(terrain_height(terrain, np.array([goal_x]), np.zeros(1))[0]),
                               terrain.platform_height_m)

    def test_spawn_region_before_ladder(self):
        terrain = ladder_terrain()
        self.assertLess(terrain.spawn_region[1], terrain.rung_centers[0, 0])
        self.assertTrue(is_locally_flat(terrain, terrain.spawn_region[0]))

    def test_same_seed_same_terrain(self):
        spec = ladder_spec()
        a = generate_ladder(spec, np.random.default_rng(11))
        b = generate_ladder(spec, np.random.default_rng(11))
        np.testing.assert_array_equal(a.rung_centers, b.rung_centers)
        self.assertEqual(a.goal_pose, b.goal_pose)

    def test_invalid_spec_raises(self):
        with self.assertRaises(InvalidSpecError):
            generate_ladder(dataclasses.replace(ladder_spec(), num_rungs=1), self.rng)

    def test_terrain_height_over_rung(self):
        terrain = ladder_terrain(incline_deg=45.0, radius=0.03)
        xc, zc = terrain.rung_centers[0]
        height = terrain_height(terrain, np.array([xc]), np.array([0.0]))[0]
        self.assertAlmostEqual(height, zc + 0.03)
        outside = terrain_height(terrain, np.array([xc]), np.array([2.0]))[0]
        self.assertAlmostEqual(outside, 0.0)


class TestOpenTerrain(unittest.TestCase):

    def test_rough_difficulty_bounds(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(InvalidSpecError):
            generate_rough(1.5, rng)
        with self.assertRaises(InvalidSpecError):
            generate_rough(-0.1, rng)

    def test_rough_zero_difficulty_is_flat(self):
        terrain = generate_rough(0.0, np.random.default_rng(0))
        self.assertTrue(np.all(terrain.rough_cells == 0.0))

    def test_rough_amplitude_scales_with_difficulty(self):
        easy = generate_rough(0.25, np.random.default_rng(5))
        hard = generate_rough(1.0, np.random.default_rng(5))
        self.assertAlmostEqual(float(np.ptp(easy.rough_cells)) * 4.0, float(np.ptp(hard.rough_cells)))

    def test_flat_terrain_height(self):
        terrain = flat_terrain()
        self.assertEqual(terrain.kind, TerrainKind.FLAT)
        np.testing.assert_array_equal(terrain_height(terrain, np.linspace(-3, 3, 7), np.zeros(7)), 0.0)
        self.assertEqual(len(terrain.rung_centers), 0)


class TestCurriculum(unittest.TestCase):

    def setUp(self):
        self.schedule = CurriculumSchedule()

    def test_level_endpoints(self):
        first = level_parameters(self.schedule, 0)
        last = level_parameters(self.schedule, self.schedule.max_level)
        self.assertAlmostEqual(first["incline_deg"], 45.0)
        self.assertAlmostEqual(first["major_radius_m"], 0.10)
        self.assertAlmostEqual(last["incline_deg"], 90.0)
        self.assertEqual(last["major_radius_m"], self.schedule.minor_radius_m)

    def test_promotions_only_make_ladders_harder(self):
        rng = np.random.default_rng(3)
        state = CurriculumState(schedule=self.schedule)
        specs = []
        while True:
            specs.append(curriculum_sample(state, rng))
            if state.level == self.schedule.max_level:
                break
            state = curriculum_update(state, EpisodeOutcome.REACHED_GOAL)
        inclines = [s.incline_rad for s in specs]
        radii = [s.rung_major_radius_m for s in specs]
        self.assertTrue(all(b >= a for a, b in zip(inclines, inclines[1:])))
        self.assertTrue(all(b <= a for a, b in zip(radii, radii[1:])))
        self.assertTrue(specs[-1].is_cylindrical())
        self.assertAlmostEqual(specs[-1].rung_major_radius_m, 0.025)
        self.assertEqual(state.promotions, self.schedule.max_level)

    def test_sampled_specs_are_valid(self):
        rng = np.random.default_rng(4)
        for level in range(self.schedule.num_levels):
            for _ in range(20):
                spec = curriculum_sample(CurriculumState(level=level, schedule=self.schedule), rng)
                validate_ladder_spec(spec)
                self.assertLessEqual(spec.platform_offset_m, MAX_PLATFORM_OFFSET)
                self.assertGreaterEqual(spec.rung_major_radius_m, spec.rung_minor_radius_m)

    def test_update_moves_one_level_and_clamps(self):
        state = CurriculumState(level=0, schedule=self.schedule)
        self.assertEqual(curriculum_update(state, EpisodeOutcome.TERMINATED).level, 0)
        self.assertEqual(curriculum_update(state, EpisodeOutcome.TIMED_OUT).level, 0)
        up = curriculum_update(state, EpisodeOutcome.REACHED_GOAL)
        self.assertEqual(up.level, 1)
        down = curriculum_update(up, EpisodeOutcome.TERMINATED)
        self.assertEqual((down.level, down.demotions), (0, 1))
        top = CurriculumState(level=self.schedule.max_level, schedule=self.schedule)
        self.assertEqual(curriculum_update(top, EpisodeOutcome.REACHED_GOAL).level, self.schedule.max_level)

    def test_level_out_of_range_rejected(self):
        with self.assertRaises(InvalidSpecError):
            curriculum_sample(CurriculumState(level=self.schedule.num_levels, schedule=self.schedule),
                              np.random.default_rng(0))

    def test_rungs_for_length(self):
        self.assertEqual(rungs_for_length(1.5, 0.3), 6)
        self.assertEqual(rungs_for_length(0.1, 0.3), 2)


class TestEvalLadders(unittest.TestCase):

    def test_cylindrical_with_requested_cell(self):
        specs = sample_eval_ladders(8, np.random.default_rng(2), incline_deg=75.0, radius_m=0.05)
        self.assertEqual(len(specs), 8)
        for spec in specs:
            self.assertTrue(spec.is_cylindrical())
            self.assertEqual(spec.rung_major_radius_m, 0.05)
            self.assertAlmostEqual(spec.incline_rad, math.radians(75.0))
            validate_ladder_spec(spec)

    def test_empty_set_rejected(self):
        with self.assertRaises(InvalidSpecError):
            sample_eval_ladders(0, np.random.default_rng(0))


class TestTerrainFiles(unittest.TestCase):

    def test_header_round_trip(self):
        terrain = dataclasses.replace(ladder_terrain(seed=42), level=3, seed=42)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "ladder.txt")
            dump_terrain(terrain, path)
            kind, level, seed, rungs = read_terrain_header(path)
        self.assertEqual((kind, level, seed), ("ladder", 3, 42))
        np.testing.assert_array_equal(rungs, terrain.rung_centers)


class TestTerrainBatch(unittest.TestCase):

    def test_ground_matches_profile(self):
        ladder = ladder_terrain()
        batch = TerrainBatch([flat_terrain(), ladder])
        xs = np.array([[0.0, ladder.platform_lip_x + 0.5], [0.0, ladder.platform_lip_x + 0.5]])
        heights, slopes = batch.ground_at(xs)
        np.testing.assert_allclose(heights[0], 0.0)
        np.testing.assert_allclose(heights[1], [0.0, ladder.platform_height_m], atol=1e-9)
        np.testing.assert_allclose(slopes[:, 0], 0.0)
        self.assertEqual(list(batch.num_rungs), [0, len(ladder.rung_centers)])

    def test_replace_grows_rung_table(self):
        batch = TerrainBatch([flat_terrain(), flat_terrain(1)])
        ladder = ladder_terrain(num_rungs=8, spacing=0.28)
        batch.replace(1, ladder)
        self.assertEqual(batch.rungs.shape[1], 8)
        np.testing.assert_array_equal(batch.rungs[1], ladder.rung_centers)
        self.assertEqual(batch.num_rungs[1], 8)


if __name__ == "__main__":
    unittest.main()
