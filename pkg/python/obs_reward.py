import hashlib
from typing import Optional, Sequence, Union

import numpy as np

from config import RewardConfig, NoiseConfig
from ladder_terrain import terrain_height
from models import RobotState, ContactState, GoalCommand, PrivilegedState, RewardBreakdown, RandomizationRecord, \
    RobotModel, TerrainInstance, TerrainKind, ObservationBundle
from util import world_to_base, wrap_angle, leg_direction

OBS_SCHEMA_VERSION = 1
HISTORY_LAGS = 3
SCAN_SHAPE = (20, 10)
SCAN_SPACING = 0.1

PROPRIO_LAYOUT = (("goal_direction", 3), ("goal_heading", 1), ("gravity", 3), ("joint_pos", 8),
                  ("joint_vel_hist", 8 * HISTORY_LAGS), ("tracking_error_hist", 8 * HISTORY_LAGS),
                  ("standing", 1))
IMU_LAYOUT = (("imu", 8 * 6),)
SCAN_LAYOUT = (("height_scan", SCAN_SHAPE[0] * SCAN_SHAPE[1]),)
PRIVILEGED_LAYOUT = (("contact_flags", 13), ("foot_forces", 12), ("friction", 4), ("external_base_force", 3),
                     ("external_base_torque", 3), ("external_foot_forces", 12), ("added_mass", 1), ("airtime", 4),
                     ("feet_pos", 12), ("ladder_state", 7), ("ladder_pose", 3))
STUDENT_LAYOUT = PROPRIO_LAYOUT + IMU_LAYOUT + (("ladder_state", 7), ("ladder_pose", 3))


def layout_ranges(layout) -> dict[str, tuple[int, int]]:
    ranges, start = {}, 0
    for name, size in layout:
        ranges[name] = (start, start + size)
        start += size
    return ranges


def layout_size(layout) -> int:
    return sum(size for _, size in layout)


def layout_hash(use_height_scan: bool = True) -> str:
    """Short digest of every observation group the networks consume; stored in checkpoints."""
    parts = [f"v{OBS_SCHEMA_VERSION}"]
    for group, layout in (("proprio", PROPRIO_LAYOUT), ("imu", IMU_LAYOUT),
                          ("scan", SCAN_LAYOUT if use_height_scan else ()), ("privileged", PRIVILEGED_LAYOUT),
                          ("student", STUDENT_LAYOUT)):
        parts.append(group + ":" + ",".join(f"{name}={size}" for name, size in layout))
    return hashlib.sha1(";".join(parts).encode()).hexdigest()[:12]


class ProprioHistory:
    """Joint velocity and tracking error at the last three policy steps, newest first."""

    def __init__(self, num_envs: int):
        self.joint_vel = np.zeros((num_envs, HISTORY_LAGS, 8))
        self.tracking_error = np.zeros((num_envs, HISTORY_LAGS, 8))
        self.filled = np.zeros(num_envs, dtype=int)

    def push(self, state: RobotState):
        self.joint_vel = np.concatenate([state.qd[:, None], self.joint_vel[:, :-1]], axis=1)
        error = state.action_hist[:, 0] - state.q
        self.tracking_error = np.concatenate([error[:, None], self.tracking_error[:, :-1]], axis=1)
        self.filled = np.minimum(self.filled + 1, HISTORY_LAGS)

    def reset(self, env_ids):
        self.joint_vel[env_ids] = 0.0
        self.tracking_error[env_ids] = 0.0
        self.filled[env_ids] = 0

    @property
    def cold(self) -> np.ndarray:
        return self.filled < HISTORY_LAGS

    def select(self, ids) -> "ProprioHistory":
        other = ProprioHistory(0)
        other.joint_vel = self.joint_vel[ids].copy()
        other.tracking_error = self.tracking_error[ids].copy()
        other.filled = self.filled[ids].copy()
        return other


def height_scan(state: RobotState, terrains: Sequence[TerrainInstance]) -> np.ndarray:
    """Terrain heights relative to the base on a 2 x 1 m grid of 0.1 m cells centered under the base."""
    xs = (np.arange(SCAN_SHAPE[0]) - (SCAN_SHAPE[0] - 1) / 2) * SCAN_SPACING
    ys = (np.arange(SCAN_SHAPE[1]) - (SCAN_SHAPE[1] - 1) / 2) * SCAN_SPACING
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    scans = np.empty((state.num_envs, SCAN_SHAPE[0] * SCAN_SHAPE[1]))
    for i, terrain in enumerate(terrains):
        x, z = state.base_pos[i]
        scans[i] = (terrain_height(terrain, x + gx, gy) - z).ravel()
    return scans


def flat_flags(scan: np.ndarray, config: RewardConfig) -> np.ndarray:
    xs = (np.arange(SCAN_SHAPE[0]) - (SCAN_SHAPE[0] - 1) / 2) * SCAN_SPACING
    ys = (np.arange(SCAN_SHAPE[1]) - (SCAN_SHAPE[1] - 1) / 2) * SCAN_SPACING
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    near = (np.hypot(gx, gy) <= config.flat_radius_m).ravel()
    local = scan[:, near]
    return (local.max(axis=1) - local.min(axis=1) < config.flat_threshold_m).astype(float)


def compute_goal(state: RobotState, goal_pose: np.ndarray, flat: np.ndarray, config: RewardConfig) -> GoalCommand:
    """goal_pose rows are world (x, base height target, heading)."""
    delta = goal_pose[:, :2] - state.base_pos
    p_goal = world_to_base(state.pitch[:, None], delta[:, None, :])[:, 0]
    dist = np.linalg.norm(p_goal, axis=1)
    p_hat = np.where(dist[:, None] > 0, p_goal / np.maximum(dist, 1e-12)[:, None], 0.0)
    return GoalCommand(p_goal=p_goal, p_hat=p_hat, heading=goal_pose[:, 2].copy(),
                       at_goal=(dist < config.goal_threshold_m).astype(float), flat=np.asarray(flat, dtype=float))


def build_proprio(state: RobotState, goal: GoalCommand, history: ProprioHistory) -> np.ndarray:
    heading_error = wrap_angle(goal.heading - state.yaw)
    return np.concatenate([goal.p_hat, heading_error[:, None], state.gravity_b, state.q,
                           history.joint_vel.reshape(state.num_envs, -1),
                           history.tracking_error.reshape(state.num_envs, -1), goal.at_goal[:, None]], axis=1)


def build_imu(state: RobotState) -> np.ndarray:
    return state.imu.reshape(state.num_envs, -1)


def feet_in_base(model: RobotModel, state: RobotState) -> np.ndarray:
    q = state.q
    a1 = q[:, 0::2]
    a2 = a1 + q[:, 1::2]
    feet = model.hip_offsets[None, :, None] * np.array([1.0, 0.0]) + \
        model.thigh_length * leg_direction(a1) + model.shank_length * leg_direction(a2)
    return np.stack([feet[..., 0], np.zeros_like(feet[..., 0]), feet[..., 1]], axis=-1)


def ladder_observation(state: RobotState, terrains: Sequence[TerrainInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Ladder state (presence flag and geometry) and bottom-rung pose in the base frame."""
    n = state.num_envs
    ladder_state = np.zeros((n, 7))
    ladder_pose = np.zeros((n, 3))
    for i, terrain in enumerate(terrains):
        spec = terrain.ladder
        if terrain.kind != TerrainKind.LADDER or spec is None or not spec.present:
            continue
        ladder_state[i] = (1.0, spec.length_m, spec.width_m, spec.spacing_m, spec.rung_major_radius_m,
                           spec.incline_rad, spec.num_rungs)
        rel = terrain.rung_centers[0] - state.base_pos[i]
        c, s = np.cos(state.pitch[i]), np.sin(state.pitch[i])
        ladder_pose[i] = (c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], wrap_angle(0.0 - state.yaw[i]))
    return ladder_state, ladder_pose


def build_privileged(model: RobotModel, state: RobotState, contacts: ContactState,
                     terrains: Sequence[TerrainInstance], record: RandomizationRecord) -> PrivilegedState:
    ladder_state, ladder_pose = ladder_observation(state, terrains)
    return PrivilegedState(contact_flags=contacts.flags(), foot_forces=contacts.foot_force.copy(),
                           friction=contacts.friction.copy(), external_base_force=record.external_base_force.copy(),
                           external_base_torque=record.external_base_torque.copy(),
                           external_foot_forces=record.external_foot_forces.copy(),
                           added_mass=record.added_mass.copy(), airtime=contacts.airtime.copy(),
                           feet_pos_b=feet_in_base(model, state), ladder_state=ladder_state, ladder_pose=ladder_pose)


def noise_scales(config: NoiseConfig, ladder_state: np.ndarray) -> np.ndarray:
    """Per-element noise scale for the student layout, (N, D); ladder scalars scale with their value."""
    n = ladder_state.shape[0]
    ranges = layout_ranges(STUDENT_LAYOUT)
    scales = np.zeros((n, layout_size(STUDENT_LAYOUT)))

    def put(name, value, offset=0, width=None):
        start, end = ranges[name]
        start += offset
        end = end if width is None else start + width
        scales[:, start:end] = value

    put("gravity", config.gravity)
    put("joint_pos", config.joint_pos)
    put("joint_vel_hist", config.joint_vel)
    put("tracking_error_hist", config.joint_pos)
    imu_start = ranges["imu"][0]
    for sample in range(8):
        base = imu_start + 6 * sample
        scales[:, base:base + 3] = config.imu_accel
        scales[:, base + 3:base + 6] = config.imu_gyro
    start = ranges["ladder_state"][0]
    # presence flag and rung count stay exact
    scales[:, start + 1:start + 6] = config.ladder_scalar_frac * np.abs(ladder_state[:, 1:6])
    put("ladder_pose", config.ladder_pose_pos_m, 0, 2)
    put("ladder_pose", config.ladder_pose_yaw_rad, 2, 1)
    return scales


def add_noise(clean: np.ndarray, scales: Union[np.ndarray, float], rng, distribution: str = "gaussian") -> np.ndarray:
    """
    Additive zero-mean noise, element-wise. rng is one Generator for the whole batch or one per row.
    Layout is preserved; zero scales leave values untouched.
    """
    clean = np.asarray(clean, dtype=float)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), clean.shape)
    if not np.any(scales):
        return clean.copy()
    if isinstance(rng, np.random.Generator):
        unit = _unit_noise(rng, clean.shape, distribution)
    else:
        unit = np.stack([_unit_noise(g, clean.shape[1:], distribution) for g in rng])
    return clean + scales * unit


def _unit_noise(rng: np.random.Generator, shape, distribution):
    if distribution == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    return rng.standard_normal(size=shape)


def build_student(proprio: np.ndarray, imu: np.ndarray, ladder_state: np.ndarray, ladder_pose: np.ndarray,
                  config: NoiseConfig, rng) -> np.ndarray:
    clean = np.concatenate([proprio, imu, ladder_state, ladder_pose], axis=1)
    if not config.enabled:
        return clean
    return add_noise(clean, noise_scales(config, ladder_state), rng, config.distribution)


def build_observations(model: RobotModel, state: RobotState, contacts: ContactState, goal: GoalCommand,
                       history: ProprioHistory, terrains: Sequence[TerrainInstance], record: RandomizationRecord,
                       scan: np.ndarray, noise: Optional[NoiseConfig], rng, use_height_scan: bool = True
                       ) -> ObservationBundle:
    proprio = build_proprio(state, goal, history)
    imu = build_imu(state)
    privileged = build_privileged(model, state, contacts, terrains, record)
    student = None
    if noise is not None:
        student = build_student(proprio, imu, privileged.ladder_state, privileged.ladder_pose, noise, rng)
    return ObservationBundle(proprio=proprio, imu=imu, height_scan=scan if use_height_scan else
                             np.zeros((state.num_envs, 0)), privileged=privileged.vector(), student=student,
                             layout_hash=layout_hash(use_height_scan))


def compute_rewards(state: RobotState, contacts: ContactState, goal: GoalCommand, q0: np.ndarray,
                    config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    v_b = state.v_b
    speed = np.linalg.norm(v_b, axis=1)
    v_over = np.maximum(0.0, speed - config.velocity_limit_mps)
    at_goal = goal.at_goal
    flat = goal.flat
    position = 3.0 * ((1.0 - at_goal) * (np.sum(v_b * goal.p_hat, axis=1) - v_over ** 2) + 1.5 * at_goal)

    heading_error = goal.heading - state.yaw
    planar_dist = goal.planar_distance
    heading = 0.5 * np.exp(-10.0 * heading_error ** 2) * np.exp(-4.0 * planar_dist ** 2)

    rates = state.angular_rates
    base_motion = 0.2 * (np.exp(-v_b[:, 2] ** 2) + np.exp(-0.5 * (rates[:, 0] ** 2 + rates[:, 1] ** 2)))

    qdd = state.qdd ** 2 if config.joints_qdd_squared else state.qdd
    joints = -0.001 * np.sum(0.01 * state.tau ** 2 + state.qd ** 2 + 0.2 * qdd, axis=1)

    targets = state.action_hist
    action_rate = -0.01 * np.sum((targets[:, 0] - targets[:, 1]) ** 2, axis=1)
    smoothness = -0.01 * np.sum((targets[:, 2] - 2.0 * targets[:, 1] + targets[:, 0]) ** 2, axis=1)

    feet = contacts.feet.astype(float)
    foot_speed = np.linalg.norm(contacts.foot_velocity_b, axis=2)
    slippery = (contacts.friction < 0.5).astype(float)
    slippage = -0.25 * np.sum(feet * foot_speed * (1.0 - 0.8 * slippery), axis=1)

    g = state.gravity_b
    flat_orientation = -flat * (g[:, 0] ** 2 + g[:, 1] ** 2) * (1.0 + 8.0 * at_goal)
    stand_still = -0.5 * flat * at_goal * np.sum(np.abs(targets[:, 0] - q0[None, :]), axis=1)
    stand_still_contact = -0.5 * at_goal * np.sum(1.0 - feet, axis=1)
    collision = -0.1 * (contacts.thighs.sum(axis=1) + contacts.shanks.sum(axis=1))
    base_collision = -contacts.base.astype(float)
    return RewardBreakdown(position_tracking=position, heading_tracking=heading, base_motion=base_motion,
                           joints=joints, action_rate=action_rate, action_smoothness=smoothness,
                           foot_slippage=slippage, flat_orientation=flat_orientation, stand_still=stand_still,
                           stand_still_contact=stand_still_contact, collision=collision,
                           base_collision=base_collision)


CONSTRAINT_FAMILIES = ("joint_position", "joint_velocity", "joint_torque")


def constraint_costs(state: RobotState, model: RobotModel) -> np.ndarray:
    """Hinge costs per family, summed over joints: (N, 3). Zero exactly on the feasible box."""
    lower = np.asarray(model.joint_pos_lower)
    upper = np.asarray(model.joint_pos_upper)
    position = np.maximum(0.0, state.q - upper) + np.maximum(0.0, lower - state.q)
    velocity = np.maximum(0.0, np.abs(state.qd) - model.joint_vel_limit)
    torque = np.maximum(0.0, np.abs(state.tau_cmd) - model.torque_limit)
    return np.stack([position.sum(axis=1), velocity.sum(axis=1), torque.sum(axis=1)], axis=1)
