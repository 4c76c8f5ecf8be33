import math
from dataclasses import dataclass, replace
from functools import partial
from typing import Optional, Sequence

import numpy as np

from config import RunConfig
from errors import SimulationDivergedError
from ladder_terrain import TerrainBatch, curriculum_sample, curriculum_update, generate_ladder, generate_rough, \
    generate_flat
from models import RobotState, ContactState, CurriculumState, DisturbanceConfig, EpisodeOutcome, TerrainInstance, \
    TerrainKind, ObservationBundle, NUM_JOINTS
from obs_reward import ProprioHistory, height_scan, flat_flags, compute_goal, build_observations, compute_rewards, \
    constraint_costs
from planar_sim import PlanarSimulator, ResetCacheEntry, apply_randomization, apply_push, push_due, reset, \
    check_termination, forward_kinematics, POLICY_DT
from util import log, spawn_generators, derive_seed

NO_DISTURBANCES = DisturbanceConfig(base_force_range_n=0.0, base_torque_range_nm=0.0, foot_force_range_n=0.0,
                                    push_velocity_std_mps=0.0, added_mass_range_kg=(0.0, 0.0),
                                    friction_range=(0.8, 0.8))


@dataclass
class StepResult:
    obs: ObservationBundle  # after resets
    final_obs: ObservationBundle  # before resets, for bootstrapping timed out episodes
    reward: np.ndarray
    costs: np.ndarray  # (N, 3)
    terminated: np.ndarray  # fell, or the simulation diverged
    timed_out: np.ndarray
    reached: np.ndarray  # stood at the goal for the dwell time this step
    done: np.ndarray
    info: dict


class LadderEnv:
    """
    A chunk of environments stepped together at the policy rate. Each environment owns its random
    stream, spawned from (seed, offset + local index), so splitting a batch into chunks never changes
    what any environment sees.

    In training mode episodes end on termination or after episode_length_s, terrains come from the
    per-environment curriculum, and reset may continue from a cached state. In evaluation mode each
    environment keeps the terrain it was given and an episode also ends once the robot has stood at
    the goal for dwell_s.
    """
    verbose = False

    def __init__(self, config: RunConfig, num_envs: int, seed: int, offset: int = 0,
                 end_effector: Optional[str] = None, terrains: Optional[Sequence[TerrainInstance]] = None,
                 training: bool = True, noise: Optional[bool] = None, disturbances: Optional[bool] = None,
                 push_std: Optional[float] = None, push_period_s: Optional[float] = None,
                 episode_length_s: Optional[float] = None, dwell_s: float = 0.0):
        self.config = config
        self.num_envs = num_envs
        self.seed = seed
        self.offset = offset
        self.training = training
        self.rngs = spawn_generators(seed, num_envs, offset)
        self.model = config.robot.model(end_effector)
        disturbed = training if disturbances is None else disturbances
        if disturbed:
            self.disturbances = config.robot.disturbances(push_std)
            if push_period_s is not None:
                self.disturbances = replace(self.disturbances, push_period_s=push_period_s)
        else:
            self.disturbances = NO_DISTURBANCES
        self.noise = replace(config.noise, enabled=config.noise.enabled if noise is None else noise)
        self.episode_length_s = config.robot.episode_length_s if episode_length_s is None else episode_length_s
        self.dwell_s = dwell_s
        self.use_height_scan = config.train.use_height_scan
        self.fixed_terrains = list(terrains) if terrains is not None else None

        self.sim = PlanarSimulator(self.model, num_envs)
        schedule = config.terrain.schedule()
        start = min(config.terrain.start_level, schedule.max_level)
        self.curriculum = [CurriculumState(level=start, schedule=schedule) for _ in range(num_envs)]
        self.cache: list[Optional[ResetCacheEntry]] = [None] * num_envs
        self.history = ProprioHistory(num_envs)
        self.state = RobotState.zeros(num_envs)
        self.contacts = ContactState.empty(num_envs)
        self.goal_pose = np.zeros((num_envs, 3))
        self.steps = np.zeros(num_envs, dtype=int)
        self.snapshot_step = np.zeros(num_envs, dtype=int)
        self.at_goal_time = np.zeros(num_envs)
        self.reached_goal = np.zeros(num_envs, dtype=bool)
        self.episode_return = np.zeros(num_envs)
        self.episodes = np.zeros(num_envs, dtype=int)
        self.reused = np.zeros(num_envs, dtype=bool)
        self.first_rung_step = -np.ones(num_envs, dtype=int)
        self.last_rung_step = -np.ones(num_envs, dtype=int)
        self.first_rung_pos = np.zeros((num_envs, 2))
        self.last_rung_pos = np.zeros((num_envs, 2))
        self.incidents = {"diverged": 0}
        # recurrent student memory lives with the environments it belongs to
        self.policy_memory: Optional[np.ndarray] = None
        self._active_key: Optional[tuple] = None
        self._active_terrains: Optional[TerrainBatch] = None

        placeholder = self.fixed_terrains or [generate_flat(np.random.default_rng(0))] * num_envs
        self.terrains = TerrainBatch(placeholder)
        self.reset_envs(np.arange(num_envs))
        self.last_obs = self.observe()

    @property
    def env_ids(self) -> np.ndarray:
        """Global environment indices."""
        return self.offset + np.arange(self.num_envs)

    @property
    def levels(self) -> np.ndarray:
        return np.array([c.level for c in self.curriculum])

    def _sample_terrain(self, i: int) -> TerrainInstance:
        if self.fixed_terrains is not None:
            return self.fixed_terrains[i]
        terrain_config = self.config.terrain
        rng = self.rngs[i]
        curriculum = self.curriculum[i]
        terrain_seed = derive_seed(self.seed, int(self.env_ids[i]), int(self.episodes[i]))
        kind = terrain_config.kinds
        if kind == "mixed":
            kind = "ladder" if rng.random() < terrain_config.ladder_fraction else "rough"
        if kind == "ladder":
            spec = curriculum_sample(curriculum, rng)
            return generate_ladder(spec, rng, level=curriculum.level, seed=terrain_seed,
                                   heading_range=terrain_config.heading_range_rad)
        if kind == "rough":
            max_level = curriculum.schedule.max_level
            difficulty = curriculum.level / max_level if max_level > 0 else 1.0
            return generate_rough(difficulty, rng, level=curriculum.level, seed=terrain_seed,
                                  max_amplitude=terrain_config.rough_max_amplitude_m,
                                  goal_distance=tuple(terrain_config.goal_distance_m),
                                  heading_range=terrain_config.heading_range_rad)
        return generate_flat(rng, level=curriculum.level, seed=terrain_seed,
                             goal_distance=tuple(terrain_config.goal_distance_m),
                             heading_range=terrain_config.heading_range_rad)

    def reset_envs(self, env_ids):
        robot = self.config.robot
        for i in np.atleast_1d(env_ids):
            i = int(i)
            rng = self.rngs[i]
            model = apply_randomization(self.model, rng, self.disturbances)
            cache = self.cache[i] if self.training else None
            terrain, state, contacts, reused = reset(model, partial(self._sample_terrain, i), cache, rng,
                                                     reuse_probability=robot.reuse_probability,
                                                     base_velocity_noise=robot.reuse_velocity_noise)
            contacts.friction[0] = model.foot_friction
            self.sim.set_env_params([i], [model])
            self.terrains.replace(i, terrain)
            self._active_key = None
            self.state.assign([i], state)
            self.contacts.assign([i], contacts)
            self.goal_pose[i] = terrain.goal_pose
            self.history.reset([i])
            self.steps[i] = 0
            self.snapshot_step[i] = rng.integers(1, max(2, int(self.episode_length_s / POLICY_DT)))
            self.at_goal_time[i] = 0.0
            self.reached_goal[i] = False
            self.episode_return[i] = 0.0
            self.reused[i] = reused
            self.first_rung_step[i] = self.last_rung_step[i] = -1
            if self.policy_memory is not None:
                self.policy_memory[i] = 0.0

    def _goal_and_scan(self):
        scan = height_scan(self.state, self.terrains.terrains)
        flat = flat_flags(scan, self.config.rewards)
        goal = compute_goal(self.state, self.goal_pose, flat, self.config.rewards)
        return goal, scan

    def observe(self) -> ObservationBundle:
        goal, scan = self._goal_and_scan()
        return self._bundle(goal, scan)

    def _bundle(self, goal, scan) -> ObservationBundle:
        return build_observations(self.model, self.state, self.contacts, goal, self.history,
                                  self.terrains.terrains, self.sim.randomization_record(), scan, self.noise,
                                  self.rngs, self.use_height_scan)

    def apply_pushes(self, active: Optional[np.ndarray] = None):
        period = self.disturbances.push_period_s
        std = self.disturbances.push_velocity_std_mps
        if std <= 0:
            return
        due = [i for i in range(self.num_envs)
               if push_due(int(self.steps[i]), period) and (active is None or active[i])]
        if due:
            self.state = apply_push(self.state, self.rngs, std, np.array(due))

    def _simulate(self, joint_targets: np.ndarray, active: Optional[np.ndarray]):
        """Physics for the active environments; the others keep their state untouched."""
        if active is None or active.all():
            return self.sim.step(self.state, self.contacts, joint_targets, self.terrains)
        ids = np.flatnonzero(active)
        key = tuple(ids)
        if self._active_key != key:
            self._active_key = key
            self._active_terrains = self.terrains.select(ids)
        state, contacts = self.state.copy(), self.contacts.copy()
        try:
            sub_state, sub_contacts = self.sim.subset(ids).step(self.state.select(ids), self.contacts.select(ids),
                                                                joint_targets[ids], self._active_terrains)
        except SimulationDivergedError as e:
            sub_state, sub_contacts = e.result
            state.assign(ids, sub_state)
            contacts.assign(ids, sub_contacts)
            raise SimulationDivergedError(e.quantity, [int(ids[i]) for i in e.env_ids],
                                          result=(state, contacts)) from None
        state.assign(ids, sub_state)
        contacts.assign(ids, sub_contacts)
        return state, contacts

    def step(self, joint_targets: np.ndarray, active: Optional[np.ndarray] = None) -> StepResult:
        """
        One policy step for the whole chunk. `active` (evaluation only) masks environments whose
        episode is over: they are not simulated and their counters stand still.
        """
        self.apply_pushes(active)
        live = np.ones(self.num_envs, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        diverged = np.zeros(self.num_envs, dtype=bool)
        try:
            state, contacts = self._simulate(joint_targets, active)
        except SimulationDivergedError as e:
            state, contacts = e.result
            diverged[e.env_ids] = True
            self.incidents["diverged"] += len(e.env_ids)
            if self.verbose:
                for i in e.env_ids:
                    log(f"simulation diverged ({e.quantity}), resetting", int(self.env_ids[i]))
            # keep the batch finite; these environments are reset below
            keep = np.flatnonzero(diverged)
            state.assign(keep, self.state.select(keep))
            contacts.assign(keep, self.contacts.select(keep))
        self.state, self.contacts = state, contacts
        self.steps += live
        self.history.push(self.state)

        goal, scan = self._goal_and_scan()
        rewards = compute_rewards(self.state, self.contacts, goal, self.model.q0, self.config.rewards)
        reward = np.where(diverged | ~live, 0.0, rewards.total)
        costs = np.where((diverged | ~live)[:, None], 0.0, constraint_costs(self.state, self.model))
        self.episode_return += reward
        self._track_climb()

        at_goal_time = np.where(goal.at_goal > 0, self.at_goal_time + POLICY_DT, 0.0)
        self.at_goal_time = np.where(live, at_goal_time, self.at_goal_time)
        reached = self.at_goal_time >= self.dwell_s - 1e-9
        reached &= (goal.at_goal > 0) & live
        self.reached_goal |= reached
        terminated = (check_termination(self.state) | diverged) & live
        timed_out = ~terminated & live & (self.steps * POLICY_DT >= self.episode_length_s - 1e-9)
        done = terminated | timed_out
        if not self.training:
            done |= reached

        for i in np.flatnonzero(self.steps == self.snapshot_step):
            if not terminated[i]:
                self.cache[i] = ResetCacheEntry(terrain=self.terrains.terrains[i], state=self.state.select([i]),
                                                contacts=self.contacts.select([i]))

        final_obs = self._bundle(goal, scan)
        ended = np.flatnonzero(done)
        outcomes = {}
        levels_before = self.levels
        for i in ended:
            if terminated[i]:
                outcome = EpisodeOutcome.TERMINATED
            elif self.reached_goal[i]:
                outcome = EpisodeOutcome.REACHED_GOAL
            else:
                outcome = EpisodeOutcome.TIMED_OUT
            outcomes[int(i)] = outcome
            if self.training and self.terrains.terrains[i].kind != TerrainKind.FLAT:
                self.curriculum[i] = curriculum_update(self.curriculum[i], outcome)
            self.episodes[i] += 1
        info = {"outcomes": outcomes, "episode_return": self.episode_return[ended].copy(),
                "episode_steps": self.steps[ended].copy(), "levels": levels_before[ended],
                "diverged": int(diverged.sum()), "rewards": rewards,
                "climb": {int(i): self.climb_summary(int(i)) for i in ended}}
        obs = final_obs
        if len(ended) and self.training:
            self.reset_envs(ended)
            obs = self.observe()
        self.last_obs = obs
        return StepResult(obs=obs, final_obs=final_obs, reward=reward, costs=costs, terminated=terminated,
                          timed_out=timed_out, reached=reached, done=done, info=info)

    def _track_climb(self):
        on_rung = (self.contacts.point_surface[:, :4] >= 1).any(axis=1) | self.contacts.hook_engaged.any(axis=1)
        first = on_rung & (self.first_rung_step < 0)
        self.first_rung_step = np.where(first, self.steps, self.first_rung_step)
        self.first_rung_pos[first] = self.state.base_pos[first]
        self.last_rung_step = np.where(on_rung, self.steps, self.last_rung_step)
        self.last_rung_pos[on_rung] = self.state.base_pos[on_rung]

    def climb_summary(self, i: int) -> dict:
        """Climb duration from first rung contact to the last rung release and the speed along the ladder."""
        terrain = self.terrains.terrains[i]
        if self.first_rung_step[i] < 0 or terrain.ladder is None:
            return {"duration_s": 0.0, "speed_mps": 0.0}
        duration = (self.last_rung_step[i] - self.first_rung_step[i]) * POLICY_DT
        axis = np.array([math.cos(terrain.ladder.incline_rad), math.sin(terrain.ladder.incline_rad)])
        along = float(np.dot(self.last_rung_pos[i] - self.first_rung_pos[i], axis))
        return {"duration_s": duration, "speed_mps": along / duration if duration > 0 else 0.0}

    def foot_positions(self) -> np.ndarray:
        return forward_kinematics(self.model, self.state)["feet"]

    def default_targets(self) -> np.ndarray:
        return np.broadcast_to(self.model.q0, (self.num_envs, NUM_JOINTS)).copy()
