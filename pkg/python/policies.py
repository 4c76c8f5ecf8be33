import os
from typing import Optional, Sequence

import numpy as np

from errors import MissingArtifactError, LayoutMismatchError
from models import BasePolicy, ObservationBundle, RobotState, NUM_JOINTS
from policy_learn import PolicyNet, StudentNet, load_teacher, load_student


class HoldPolicy(BasePolicy):
    """Commands the default pose forever."""

    def __init__(self, q0: np.ndarray):
        super().__init__("hold")
        self.q0 = np.asarray(q0, dtype=float)

    def act(self, obs: ObservationBundle, state: RobotState) -> np.ndarray:
        return np.broadcast_to(self.q0, (state.num_envs, NUM_JOINTS)).copy()


class RandomPolicy(BasePolicy):
    """Uniform joint-target offsets around the default pose, one random stream per environment."""

    def __init__(self, q0: np.ndarray, rngs: Sequence[np.random.Generator], scale: float = 0.5):
        super().__init__("random")
        self.q0 = np.asarray(q0, dtype=float)
        self.rngs = list(rngs)
        self.scale = scale

    def act(self, obs: ObservationBundle, state: RobotState) -> np.ndarray:
        offsets = np.stack([rng.uniform(-self.scale, self.scale, NUM_JOINTS) for rng in self.rngs])
        return self.q0 + offsets


class ScriptedPolicy(BasePolicy):
    """
    Plays a hand-authored joint-target sequence: keyframes (time_s, targets) linearly interpolated,
    looping after the last keyframe when `loop` is set, otherwise holding it.
    """

    def __init__(self, keyframes: Sequence[tuple[float, Sequence[float]]], num_envs: int, dt: float,
                 loop: bool = False):
        super().__init__("scripted")
        if not keyframes:
            raise ValueError("scripted policy needs at least one keyframe")
        self.times = np.array([k[0] for k in keyframes], dtype=float)
        self.targets = np.array([k[1] for k in keyframes], dtype=float)
        if np.any(np.diff(self.times) < 0):
            raise ValueError("keyframe times must be non-decreasing")
        self.dt = dt
        self.loop = loop
        self.clock = np.zeros(num_envs)

    def reset(self, env_ids: np.ndarray):
        self.clock[env_ids] = 0.0

    def targets_at(self, t: np.ndarray) -> np.ndarray:
        if self.loop and self.times[-1] > 0:
            t = np.mod(t, self.times[-1])
        return np.stack([np.interp(t, self.times, self.targets[:, j]) for j in range(self.targets.shape[1])], axis=-1)

    def act(self, obs: ObservationBundle, state: RobotState) -> np.ndarray:
        out = self.targets_at(self.clock)
        self.clock += self.dt
        return out


class TeacherPolicy(BasePolicy):
    """Deterministic teacher: the action mean around the default pose."""

    def __init__(self, net: PolicyNet, q0: np.ndarray):
        super().__init__("teacher")
        self.net = net
        self.q0 = np.asarray(q0, dtype=float)

    def act(self, obs: ObservationBundle, state: RobotState) -> np.ndarray:
        return self.q0 + self.net.forward(self.net.inputs(obs))[0]


class StudentPolicy(BasePolicy):
    """Recurrent student acting on the noisy student observation; memory is kept per environment."""

    def __init__(self, net: StudentNet, q0: np.ndarray, num_envs: int):
        super().__init__("student")
        self.net = net
        self.q0 = np.asarray(q0, dtype=float)
        self.hidden = net.initial_state(num_envs)

    def reset(self, env_ids: np.ndarray):
        self.hidden[env_ids] = 0.0

    def act(self, obs: ObservationBundle, state: RobotState) -> np.ndarray:
        if self.net.layout_hash and obs.layout_hash != self.net.layout_hash:
            raise LayoutMismatchError(self.net.layout_hash, obs.layout_hash)
        mean, self.hidden = self.net.act(obs.student, self.hidden)
        return self.q0 + mean


POLICY_NAMES = ("hold", "random", "scripted", "teacher", "student")


def make_policy(name: str, q0: np.ndarray, num_envs: int, checkpoint: Optional[str] = None,
                rngs: Optional[Sequence[np.random.Generator]] = None, layout: Optional[str] = None,
                keyframes=None, dt: float = 0.02) -> BasePolicy:
    if name == "hold":
        return HoldPolicy(q0)
    if name == "random":
        return RandomPolicy(q0, rngs if rngs is not None else [np.random.default_rng(i) for i in range(num_envs)])
    if name == "scripted":
        return ScriptedPolicy(keyframes if keyframes is not None else [(0.0, q0)], num_envs, dt)
    if name in ("teacher", "student"):
        if not checkpoint:
            raise MissingArtifactError(f"{name} checkpoint", checkpoint or "<none given>")
        if not os.path.exists(checkpoint):
            raise MissingArtifactError(f"{name} checkpoint", checkpoint)
        if name == "teacher":
            return TeacherPolicy(load_teacher(checkpoint, expected_layout=layout), q0)
        return StudentPolicy(load_student(checkpoint, expected_layout=layout), q0, num_envs)
    raise NotImplementedError(f"No policy named {name}.")
