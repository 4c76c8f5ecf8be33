import ast
import difflib
import os
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Union

from errors import ConfigError, MissingArtifactError
from models import RobotModel, HookModel, ContactModel, DisturbanceConfig, CurriculumSchedule, EndEffector

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
# profiles also known under another name
PROFILE_ALIASES = {"paper": "full"}

DEFAULT_OUTPUT_ROOT = "Output"
OUTPUT_ENV_VAR = "LADDERGYM_OUT"


@dataclass
class TerrainConfig:
    kinds: str = "mixed"  # mixed | ladder | rough | flat
    ladder_fraction: float = 0.7
    num_levels: int = 10
    start_level: int = 0
    incline_range_deg: tuple = (45.0, 90.0)
    length_range_m: tuple = (1.0, 3.0)
    major_radius_range_m: tuple = (0.10, 0.025)
    minor_radius_m: float = 0.025
    spacing_range_m: tuple = (0.275, 0.325)
    width_range_m: tuple = (1.0, 1.25)
    max_platform_offset_m: float = 0.15
    rough_max_amplitude_m: float = 0.2
    goal_distance_m: tuple = (1.0, 3.0)
    heading_range_rad: float = 0.0

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(num_levels=self.num_levels, incline_range_deg=tuple(self.incline_range_deg),
                                  length_range_m=tuple(self.length_range_m),
                                  major_radius_range_m=tuple(self.major_radius_range_m),
                                  minor_radius_m=self.minor_radius_m, spacing_range_m=tuple(self.spacing_range_m),
                                  width_range_m=tuple(self.width_range_m),
                                  max_platform_offset_m=self.max_platform_offset_m)


@dataclass
class RobotConfig:
    end_effector: str = "ball"  # ball | hook
    base_mass_kg: float = 25.0
    kp: float = 80.0
    kd: float = 2.0
    torque_limit_nm: float = 80.0
    joint_vel_limit: float = 7.5
    normal_stiffness: float = 5000.0
    normal_damping: float = 100.0
    hook_opening_radius_m: float = 0.0275
    hook_breakaway_n: float = 500.0
    added_mass_range_kg: tuple = (-5.0, 5.0)
    friction_range: tuple = (0.3, 1.0)
    base_force_range_n: float = 30.0
    base_torque_range_nm: float = 10.0
    foot_force_range_n: float = 0.0
    push_std_mps: float = 0.5
    push_period_s: float = 5.0
    reuse_probability: float = 0.5
    reuse_velocity_noise: float = 0.2
    episode_length_s: float = 10.0

    def model(self, end_effector: Optional[str] = None) -> RobotModel:
        kind = EndEffector[(end_effector or self.end_effector).upper()]
        return RobotModel(base_mass=self.base_mass_kg, kp=self.kp, kd=self.kd, torque_limit=self.torque_limit_nm,
                          joint_vel_limit=self.joint_vel_limit, end_effector=kind,
                          hook=HookModel(opening_radius_m=self.hook_opening_radius_m,
                                         breakaway_force_n=self.hook_breakaway_n),
                          contact=ContactModel(normal_stiffness=self.normal_stiffness,
                                               normal_damping=self.normal_damping))

    def disturbances(self, push_std: Optional[float] = None) -> DisturbanceConfig:
        return DisturbanceConfig(base_force_range_n=self.base_force_range_n,
                                 base_torque_range_nm=self.base_torque_range_nm,
                                 foot_force_range_n=self.foot_force_range_n,
                                 push_velocity_std_mps=self.push_std_mps if push_std is None else push_std,
                                 push_period_s=self.push_period_s,
                                 added_mass_range_kg=tuple(self.added_mass_range_kg),
                                 friction_range=tuple(self.friction_range))


@dataclass
class RewardConfig:
    goal_threshold_m: float = 0.15
    velocity_limit_mps: float = 0.7
    joints_qdd_squared: bool = False
    flat_threshold_m: float = 0.02
    flat_radius_m: float = 0.5


@dataclass
class NoiseConfig:
    enabled: bool = True
    distribution: str = "gaussian"  # gaussian: scale is the std, uniform: scale is the half width
    joint_pos: float = 0.01
    joint_vel: float = 1.5
    imu_accel: float = 0.5
    imu_gyro: float = 0.1
    gravity: float = 0.02
    ladder_pose_pos_m: float = 0.02
    ladder_pose_yaw_rad: float = 0.05
    ladder_scalar_frac: float = 0.05


@dataclass
class TrainConfig:
    num_envs: int = 256
    steps_per_batch: int = 48
    student_steps_per_batch: int = 120
    epochs: int = 1500
    student_epochs: int = 500
    learning_rate: float = 3e-4
    lr_decay: bool = True
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.005
    value_coef: float = 1.0
    update_epochs: int = 5
    mini_batches: int = 4
    max_grad_norm: float = 1.0
    init_log_std: float = -1.0
    imu_hidden: tuple = (64, 64)
    trunk_hidden: tuple = (128, 128)
    belief_hidden: int = 128
    use_height_scan: bool = True
    barrier_t: float = 20.0  # barrier weight is 1/t; t <= 0 turns the barrier off
    barrier_margin: float = 0.05  # slack below margin * d_j switches to the linear extension
    threshold_start: tuple = (2.0, 2.0, 20.0)
    threshold_end: tuple = (0.1, 0.1, 1.0)
    threshold_anneal_fraction: float = 0.3
    threshold_schedule: str = "linear"  # linear | performance
    reconstruction_weight: float = 0.5
    distill_mode: str = "dagger"  # dagger | bc
    distill_learning_rate: float = 1e-3
    teacher_checkpoint: str = ""
    normalize_advantages: bool = True
    env_chunk: int = 32
    checkpoint_every: int = 100


@dataclass
class EvalConfig:
    inclines_deg: list = field(default_factory=lambda: [70.0, 80.0, 90.0])
    radii_m: list = field(default_factory=lambda: [0.02, 0.025, 0.035])
    agents_per_cell: int = 256
    ladder_set_size: int = 50
    timeout_s: float = 15.0
    dwell_s: float = 0.5
    disturbances: bool = True
    noise: bool = True
    push_std_mps: float = 1.0
    push_period_s: float = 5.0
    end_effector: str = "hook"
    policy: str = "student"  # student | teacher | hold | random
    checkpoint: str = ""
    num_ladders: int = 5  # gen-terrain
    pulls: list = field(default_factory=list)  # perturb: (time_s, body, (fx, fz), duration_s)


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1
    out: str = ""
    verbose: bool = False
    tag: str = ""


SECTIONS = {
    "terrain": TerrainConfig,
    "robot": RobotConfig,
    "rewards": RewardConfig,
    "noise": NoiseConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "run": RunSection,
}


@dataclass
class RunConfig:
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    robot: RobotConfig = field(default_factory=RobotConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)
    provenance: dict = field(default_factory=dict)
    run_dir: str = ""

    @property
    def seed(self) -> int:
        return self.run.seed

    def get(self, key: str):
        section, name = key.split(".", 1)
        return getattr(getattr(self, section), name)

    def output_root(self) -> str:
        if self.run.out:
            return self.run.out
        if root := os.getenv(OUTPUT_ENV_VAR):
            return root
        return DEFAULT_OUTPUT_ROOT


def known_keys() -> list[str]:
    return [f"{section}.{f.name}" for section, cls in SECTIONS.items() for f in fields(cls)]


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected 'section.key = value', got {text.strip()!r}")
    key, raw = text.split("=", 1)
    return key.strip(), raw.strip()


def _literal(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def coerce(key: str, raw, expected):
    value = _literal(raw) if isinstance(raw, str) else raw
    origin = typing.get_origin(expected) or expected
    if expected is bool:
        if isinstance(value, bool):
            return value
    elif expected is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif expected is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif expected is str:
        return value if isinstance(value, str) else str(raw)
    elif origin in (tuple, list):
        if isinstance(value, (tuple, list)):
            return origin(float(v) if isinstance(v, int) and not isinstance(v, bool) else v for v in value)
    raise ConfigError(f"type mismatch for {key}: expected {getattr(expected, '__name__', expected)}, got {raw!r}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def apply_setting(config: RunConfig, key: str, raw, origin: str) -> RunConfig:
    if "." not in key or key not in known_keys():
        suggestion = difflib.get_close_matches(key, known_keys(), n=1)
        hint = f"; did you mean {suggestion[0]}?" if suggestion else ""
        raise ConfigError(f"unknown config key {key}{hint}")
    section_name, name = key.split(".", 1)
    section = getattr(config, section_name)
    value = coerce(key, raw, _field_types(type(section))[name])
    setattr(config, section_name, replace(section, **{name: value}))
    config.provenance[key] = origin
    return config


def resolve_profile(path: Union[str, os.PathLike]) -> str:
    """
    An existing path is used as is. A bare profile name (`desk`) resolves under configs/, and an
    aliased file name (`configs/paper.cfg`) to the file it stands for next to it.
    """
    path = str(path)
    if os.path.exists(path):
        return path
    folder, name = os.path.split(path)
    stem, extension = os.path.splitext(name)
    candidates = []
    if stem in PROFILE_ALIASES:
        candidates.append(os.path.join(folder, f"{PROFILE_ALIASES[stem]}{extension or '.cfg'}"))
    if not folder and not extension:
        candidates.append(os.path.join(CONFIG_DIR, f"{PROFILE_ALIASES.get(stem, stem)}.cfg"))
    for candidate in candidates:
        if os.path.exists(candidate):
            return candidate
    raise MissingArtifactError("config file", path)


def parse_config(path: Optional[Union[str, os.PathLike]] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    """
    defaults <- file <- flag overrides. Every known key ends up with a provenance
    of "default", "file" or "flag".
    """
    config = RunConfig()
    config.provenance = {key: "default" for key in known_keys()}
    if path:
        path = resolve_profile(path)
        with open(path) as file:
            for line_number, line in enumerate(file, start=1):
                text = _strip_comment(line).strip()
                if not text:
                    continue
                try:
                    key, raw = parse_assignment(text)
                    apply_setting(config, key, raw, "file")
                except ConfigError as e:
                    raise ConfigError(f"{path}:{line_number}: {e}") from None
    for item in overrides or []:
        key, raw = parse_assignment(item)
        apply_setting(config, key, raw, "flag")
    validate(config)
    return config


def validate(config: RunConfig):
    train = config.train
    for key in ("num_envs", "steps_per_batch", "student_steps_per_batch", "epochs", "student_epochs",
                "update_epochs", "mini_batches", "env_chunk"):
        if getattr(train, key) <= 0:
            raise ConfigError(f"train.{key} must be positive, got {getattr(train, key)}")
    if not 0 < train.clip < 1:
        raise ConfigError(f"train.clip must lie in (0, 1), got {train.clip}")
    if any(v < 0 for v in tuple(train.threshold_start) + tuple(train.threshold_end)):
        raise ConfigError("train.threshold_start and train.threshold_end must be non-negative")
    if len(train.threshold_start) != 3 or len(train.threshold_end) != 3:
        raise ConfigError("train thresholds need one value per constraint family (position, velocity, torque)")
    if config.eval.timeout_s <= 0:
        raise ConfigError(f"eval.timeout_s must be positive, got {config.eval.timeout_s}")
    if not config.eval.inclines_deg or not config.eval.radii_m:
        raise ConfigError("eval.inclines_deg and eval.radii_m must be non-empty")
    for key, options in (("robot.end_effector", ("ball", "hook")), ("eval.end_effector", ("ball", "hook")),
                         ("terrain.kinds", ("mixed", "ladder", "rough", "flat")),
                         ("noise.distribution", ("gaussian", "uniform")),
                         ("train.threshold_schedule", ("linear", "performance")),
                         ("train.distill_mode", ("dagger", "bc")),
                         ("eval.policy", ("student", "teacher", "hold", "random"))):
        if config.get(key) not in options:
            raise ConfigError(f"{key} must be one of {', '.join(options)}, got {config.get(key)!r}")


def echo_config(config: RunConfig, path: Union[str, os.PathLike]):
    with open(path, "w") as file:
        for key in known_keys():
            file.write(f"{key} = {config.get(key)!r}  # {config.provenance.get(key, 'default')}\n")
