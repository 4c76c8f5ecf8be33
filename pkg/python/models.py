from abc import abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np


class TerrainKind(Enum):
    LADDER = 0
    ROUGH = 1
    FLAT = 2


class EndEffector(Enum):
    BALL = 0
    HOOK = 1


class HookStatus(Enum):
    DISENGAGED = 0
    RESTING = 1
    ENGAGED = 2


class EpisodeOutcome(Enum):
    REACHED_GOAL = 0
    TERMINATED = 1
    TIMED_OUT = 2


class PolicyRole(Enum):
    TEACHER = "teacher"
    STUDENT = "student"


LEG_NAMES = ("LF", "RF", "LH", "RH")
JOINT_NAMES = tuple(f"{leg}_{joint}" for leg in LEG_NAMES for joint in ("HFE", "KFE"))
NUM_LEGS = 4
NUM_JOINTS = 8
NUM_DOF = 3 + NUM_JOINTS  # base x, base z, pitch, joints

# contact points: 4 feet, 2 per thigh (mid, knee), 1 per shank, 4 base corners
FOOT_POINTS = slice(0, 4)
THIGH_POINTS = slice(4, 12)
SHANK_POINTS = slice(12, 16)
BASE_POINTS = slice(16, 20)
NUM_CONTACT_POINTS = 20


@dataclass
class LadderSpec:
    length_m: float
    width_m: float
    spacing_m: float
    rung_minor_radius_m: float
    rung_major_radius_m: float
    incline_rad: float
    num_rungs: int
    platform_offset_m: float = 0.0
    present: bool = True

    def is_cylindrical(self) -> bool:
        return self.rung_major_radius_m == self.rung_minor_radius_m


@dataclass
class TerrainInstance:
    kind: TerrainKind
    ladder: Optional[LadderSpec]
    rung_centers: np.ndarray  # (num_rungs, 2) world (x, z)
    platform_height_m: float
    platform_lip_x: float
    rough_cells: np.ndarray  # (rows, cols) heights, rows along y, cols along x
    cell_size_m: float
    origin: tuple[float, float]  # world (x, y) of cell [0, 0] center
    ground_profile: np.ndarray  # (K, 2) piecewise linear (x, z) breakpoints along y == 0
    spawn_region: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    goal_pose: tuple[float, float, float]  # x, z (base height target), heading
    level: int = 0
    seed: int = 0

    @property
    def center_row(self) -> int:
        return int(round(-self.origin[1] / self.cell_size_m))

    @property
    def rung_radius(self) -> float:
        return self.ladder.rung_major_radius_m if self.ladder is not None else 0.0


@dataclass
class CurriculumSchedule:
    num_levels: int = 10
    incline_range_deg: tuple[float, float] = (45.0, 90.0)
    length_range_m: tuple[float, float] = (1.0, 3.0)
    major_radius_range_m: tuple[float, float] = (0.10, 0.025)  # level 0 -> max level
    minor_radius_m: float = 0.025
    spacing_range_m: tuple[float, float] = (0.275, 0.325)
    width_range_m: tuple[float, float] = (1.0, 1.25)
    max_platform_offset_m: float = 0.15

    @property
    def max_level(self) -> int:
        return self.num_levels - 1


@dataclass
class CurriculumState:
    level: int = 0
    promotions: int = 0
    demotions: int = 0
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)


@dataclass
class HookModel:
    opening_radius_m: float = 0.0275
    # pocket center in the shank frame: (forward, along shank towards the sole)
    pocket_center_offset: tuple[float, float] = (0.0, 0.05)
    engage_tolerance_m: float = 0.01
    aperture_half_angle_rad: float = np.pi / 3
    # direction out of the pocket opening in the shank frame
    aperture_axis: tuple[float, float] = (1.0, 0.0)
    shell_radius_m: float = 0.02
    breakaway_force_n: float = 500.0
    release_speed_mps: float = 0.05


@dataclass
class ContactModel:
    normal_stiffness: float = 5000.0
    normal_damping: float = 100.0
    tangential_stiffness: float = 5000.0
    tangential_damping: float = 50.0
    body_friction: float = 0.8
    tolerance_m: float = 1e-4


@dataclass
class RobotModel:
    base_mass: float = 25.0
    trunk_length: float = 0.6
    trunk_height: float = 0.15
    thigh_length: float = 0.3
    shank_length: float = 0.3
    thigh_mass: float = 2.0
    shank_mass: float = 1.0
    foot_radius: float = 0.03
    link_radius: float = 0.04
    base_corner_radius: float = 0.02
    default_joint_pos: tuple = (0.5, -1.0, 0.5, -1.0, -0.5, 1.0, -0.5, 1.0)
    joint_pos_lower: tuple = (-2.4, -2.7, -2.4, -2.7, -2.4, 0.0, -2.4, 0.0)
    joint_pos_upper: tuple = (2.4, 0.0, 2.4, 0.0, 2.4, 2.7, 2.4, 2.7)
    joint_vel_limit: float = 7.5
    torque_limit: float = 80.0
    kp: float = 80.0
    kd: float = 2.0
    joint_damping: float = 0.05
    gravity: float = 9.81
    end_effector: EndEffector = EndEffector.BALL
    hook: HookModel = field(default_factory=HookModel)
    contact: ContactModel = field(default_factory=ContactModel)
    added_mass: float = 0.0
    foot_friction: tuple = (0.8, 0.8, 0.8, 0.8)
    external_base_force: tuple = (0.0, 0.0, 0.0)
    external_base_torque: tuple = (0.0, 0.0, 0.0)
    external_foot_forces: tuple = ((0.0, 0.0, 0.0),) * 4

    @property
    def hip_offsets(self) -> np.ndarray:
        half = 0.5 * self.trunk_length
        return np.array([half, half, -half, -half])

    @property
    def q0(self) -> np.ndarray:
        return np.asarray(self.default_joint_pos, dtype=float)

    @property
    def standing_height(self) -> float:
        """Base height above flat ground in the default pose, feet touching."""
        q = self.q0
        drops = (self.thigh_length * np.cos(q[0::2]) + self.shank_length * np.cos(q[0::2] + q[1::2]))
        return float(np.max(drops)) + self.foot_radius


@dataclass
class DisturbanceConfig:
    base_force_range_n: float = 30.0
    base_torque_range_nm: float = 10.0
    foot_force_range_n: float = 0.0
    push_velocity_std_mps: float = 0.5
    push_period_s: float = 5.0
    added_mass_range_kg: tuple[float, float] = (-5.0, 5.0)
    friction_range: tuple[float, float] = (0.3, 1.0)


@dataclass
class RobotState:
    """Batched planar robot state; every array has the environment index first."""
    base_pos: np.ndarray  # (N, 2) world x, z
    pitch: np.ndarray  # (N,)
    base_vel: np.ndarray  # (N, 2) world vx, vz
    pitch_rate: np.ndarray  # (N,)
    q: np.ndarray  # (N, 8)
    qd: np.ndarray  # (N, 8)
    qdd: np.ndarray  # (N, 8)
    tau: np.ndarray  # (N, 8) applied, post clamp
    tau_cmd: np.ndarray  # (N, 8) PD command before the clamp
    action_hist: np.ndarray  # (N, 3, 8) targets at t, t-1, t-2
    imu: np.ndarray  # (N, 8, 6) base accel + angular velocity, oldest first

    @staticmethod
    def zeros(n: int) -> "RobotState":
        return RobotState(base_pos=np.zeros((n, 2)), pitch=np.zeros(n), base_vel=np.zeros((n, 2)),
                          pitch_rate=np.zeros(n), q=np.zeros((n, 8)), qd=np.zeros((n, 8)),
                          qdd=np.zeros((n, 8)), tau=np.zeros((n, 8)), tau_cmd=np.zeros((n, 8)),
                          action_hist=np.zeros((n, 3, 8)), imu=np.zeros((n, 8, 6)))

    @property
    def num_envs(self) -> int:
        return self.pitch.shape[0]

    @property
    def roll(self) -> np.ndarray:
        return np.zeros_like(self.pitch)

    @property
    def yaw(self) -> np.ndarray:
        return np.zeros_like(self.pitch)

    @property
    def v_b(self) -> np.ndarray:
        """Base linear velocity in the base frame, (N, 3) with y == 0."""
        c, s = np.cos(self.pitch), np.sin(self.pitch)
        vx, vz = self.base_vel[:, 0], self.base_vel[:, 1]
        return np.stack([c * vx + s * vz, np.zeros_like(vx), -s * vx + c * vz], axis=1)

    @property
    def angular_rates(self) -> np.ndarray:
        """(roll, pitch, yaw) rates, (N, 3)."""
        z = np.zeros_like(self.pitch_rate)
        return np.stack([z, self.pitch_rate, z], axis=1)

    @property
    def gravity_b(self) -> np.ndarray:
        """Unit gravity direction in the base frame, (N, 3)."""
        return np.stack([-np.sin(self.pitch), np.zeros_like(self.pitch), -np.cos(self.pitch)], axis=1)

    def generalized(self) -> tuple[np.ndarray, np.ndarray]:
        pos = np.concatenate([self.base_pos, self.pitch[:, None], self.q], axis=1)
        vel = np.concatenate([self.base_vel, self.pitch_rate[:, None], self.qd], axis=1)
        return pos, vel

    def select(self, ids) -> "RobotState":
        return RobotState(**{name: getattr(self, name)[ids].copy() for name in self.__dataclass_fields__})

    def assign(self, ids, other: "RobotState"):
        for name in self.__dataclass_fields__:
            getattr(self, name)[ids] = getattr(other, name)

    def copy(self) -> "RobotState":
        return RobotState(**{name: getattr(self, name).copy() for name in self.__dataclass_fields__})


@dataclass
class ContactState:
    """Batched contact bookkeeping; point-level arrays follow the contact point order."""
    point_contact: np.ndarray  # (N, 20) bool
    point_surface: np.ndarray  # (N, 20) int, -1 none, 0 ground, 1 + j rung j
    anchors: np.ndarray  # (N, 20, 2) tangential stick anchors
    foot_force: np.ndarray  # (N, 4, 3) world frame, F_y == 0
    foot_normal_force: np.ndarray  # (N, 4) along the contact normal; < 0 means tension
    foot_velocity_b: np.ndarray  # (N, 4, 3) base frame
    friction: np.ndarray  # (N, 4)
    airtime: np.ndarray  # (N, 4)
    hook_engaged: np.ndarray  # (N, 4) bool
    engaged_rung: np.ndarray  # (N, 4) int, -1 when free
    hook_anchor: np.ndarray  # (N, 4, 2) pocket offset from the rung center, fixed at capture
    hook_cooldown_rung: np.ndarray  # (N, 4) int, rung a hook just left
    hook_breakaways: np.ndarray  # (N, 4) int, counted over the episode

    @staticmethod
    def empty(n: int, friction: float = 0.8) -> "ContactState":
        return ContactState(point_contact=np.zeros((n, NUM_CONTACT_POINTS), dtype=bool),
                            point_surface=-np.ones((n, NUM_CONTACT_POINTS), dtype=int),
                            anchors=np.zeros((n, NUM_CONTACT_POINTS, 2)), foot_force=np.zeros((n, 4, 3)),
                            foot_normal_force=np.zeros((n, 4)), foot_velocity_b=np.zeros((n, 4, 3)),
                            friction=np.full((n, 4), friction), airtime=np.zeros((n, 4)),
                            hook_engaged=np.zeros((n, 4), dtype=bool), engaged_rung=-np.ones((n, 4), dtype=int),
                            hook_anchor=np.zeros((n, 4, 2)),
                            hook_cooldown_rung=-np.ones((n, 4), dtype=int),
                            hook_breakaways=np.zeros((n, 4), dtype=int))

    @property
    def feet(self) -> np.ndarray:
        return self.point_contact[:, FOOT_POINTS]

    @property
    def thighs(self) -> np.ndarray:
        pts = self.point_contact[:, THIGH_POINTS]
        return pts[:, 0::2] | pts[:, 1::2]

    @property
    def shanks(self) -> np.ndarray:
        return self.point_contact[:, SHANK_POINTS]

    @property
    def base(self) -> np.ndarray:
        return self.point_contact[:, BASE_POINTS].any(axis=1)

    def flags(self) -> np.ndarray:
        """c_k for feet, thighs, shanks, base: (N, 13)."""
        return np.concatenate([self.feet, self.thighs, self.shanks, self.base[:, None]], axis=1).astype(float)

    def select(self, ids) -> "ContactState":
        return ContactState(**{name: getattr(self, name)[ids].copy() for name in self.__dataclass_fields__})

    def assign(self, ids, other: "ContactState"):
        for name in self.__dataclass_fields__:
            getattr(self, name)[ids] = getattr(other, name)

    def copy(self) -> "ContactState":
        return ContactState(**{name: getattr(self, name).copy() for name in self.__dataclass_fields__})


@dataclass
class RandomizationRecord:
    """Per-environment draws of the episode randomization, as seen by the privileged observation."""
    added_mass: np.ndarray  # (N,)
    external_base_force: np.ndarray  # (N, 3)
    external_base_torque: np.ndarray  # (N, 3)
    external_foot_forces: np.ndarray  # (N, 4, 3)


@dataclass
class GoalCommand:
    p_goal: np.ndarray  # (N, 3) base frame
    p_hat: np.ndarray  # (N, 3)
    heading: np.ndarray  # (N,) psi_goal
    at_goal: np.ndarray  # (N,) delta_goal
    flat: np.ndarray  # (N,) delta_f

    @property
    def planar_distance(self) -> np.ndarray:
        return np.linalg.norm(self.p_goal[:, :2], axis=1)


@dataclass
class PrivilegedState:
    contact_flags: np.ndarray  # (N, 13)
    foot_forces: np.ndarray  # (N, 4, 3)
    friction: np.ndarray  # (N, 4)
    external_base_force: np.ndarray  # (N, 3)
    external_base_torque: np.ndarray  # (N, 3)
    external_foot_forces: np.ndarray  # (N, 4, 3)
    added_mass: np.ndarray  # (N,)
    airtime: np.ndarray  # (N, 4)
    feet_pos_b: np.ndarray  # (N, 4, 3)
    ladder_state: np.ndarray  # (N, 7) present, length, width, spacing, radius, incline, num_rungs
    ladder_pose: np.ndarray  # (N, 3) bottom rung x, z in base frame, yaw

    def vector(self) -> np.ndarray:
        n = self.added_mass.shape[0]
        return np.concatenate([self.contact_flags, self.foot_forces.reshape(n, -1), self.friction,
                               self.external_base_force, self.external_base_torque,
                               self.external_foot_forces.reshape(n, -1), self.added_mass[:, None], self.airtime,
                               self.feet_pos_b.reshape(n, -1), self.ladder_state, self.ladder_pose], axis=1)


@dataclass
class RewardBreakdown:
    position_tracking: np.ndarray
    heading_tracking: np.ndarray
    base_motion: np.ndarray
    joints: np.ndarray
    action_rate: np.ndarray
    action_smoothness: np.ndarray
    foot_slippage: np.ndarray
    flat_orientation: np.ndarray
    stand_still: np.ndarray
    stand_still_contact: np.ndarray
    collision: np.ndarray
    base_collision: np.ndarray

    @staticmethod
    def names() -> list[str]:
        return list(RewardBreakdown.__dataclass_fields__)

    @property
    def total(self) -> np.ndarray:
        total = np.zeros_like(np.asarray(self.position_tracking, dtype=float))
        for name in self.names():
            total = total + getattr(self, name)
        return total


@dataclass
class ObservationBundle:
    proprio: np.ndarray
    imu: np.ndarray
    height_scan: np.ndarray
    privileged: np.ndarray
    student: Optional[np.ndarray]
    layout_hash: str

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)


class BasePolicy:
    name: str

    def __init__(self, name="My Policy") -> None:
        self.name = name

    def reset(self, env_ids: np.ndarray):
        """Clear per-environment memory (recurrent state) for the given envs."""

    @abstractmethod
    def act(self, obs: ObservationBundle, state: RobotState) -> np.ndarray:
        """
        :param obs: observations of every environment
        :param state: current robot state (scripted policies read joint positions from it)
        :return: joint position targets, (N, 8)
        """
