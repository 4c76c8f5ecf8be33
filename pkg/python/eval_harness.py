import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import RunConfig, known_keys
from ladder_env import LadderEnv
from ladder_terrain import sample_eval_ladders, generate_ladder
from models import BasePolicy, EpisodeOutcome, RewardBreakdown, TerrainInstance, LEG_NAMES
from obs_reward import layout_hash
from planar_sim import POLICY_DT
from policies import make_policy
from util import log, starmap, derive_seed, spawn_generators
from visualization import plot_grid_heatmap

GRID_COLUMNS = ["incline_deg", "radius_m", "n", "success", "term", "timeout", "mean_time_s", "mean_speed_mps"]
CONTACT_FLAG_NAMES = [f"c_{leg}_foot" for leg in LEG_NAMES] + [f"c_{leg}_thigh" for leg in LEG_NAMES] + \
                     [f"c_{leg}_shank" for leg in LEG_NAMES] + ["c_base"]
TRAJECTORY_COLUMNS = ["t", "base_x", "base_z", "pitch"] + [f"q{j}" for j in range(8)] + CONTACT_FLAG_NAMES + \
                     [f"F{axis}_{leg}" for leg in LEG_NAMES for axis in ("x", "z")] + \
                     [f"hook_{leg}" for leg in LEG_NAMES] + RewardBreakdown.names()


def config_digest(config: RunConfig) -> str:
    """Hash of every effective value that influences results (output paths and verbosity excluded)."""
    text = "\n".join(f"{key}={config.get(key)!r}" for key in known_keys()
                     if key not in ("run.out", "run.verbose", "run.workers", "run.tag"))
    return hashlib.sha1(text.encode()).hexdigest()[:12]


def file_digest(path: Optional[str]) -> str:
    if not path or not os.path.exists(path):
        return "none"
    with open(path, "rb") as file:
        return hashlib.sha1(file.read()).hexdigest()[:12]


def cell_seed(seed: int, incline_deg: float, radius_m: float) -> int:
    """Depends only on the cell, never on its position in the grid."""
    return derive_seed(seed, int(round(incline_deg * 1000)), int(round(radius_m * 1e6)))


def eval_ladders(config: RunConfig, incline_deg: float, radius_m: float) -> list[TerrainInstance]:
    seed = cell_seed(config.seed, incline_deg, radius_m)
    rng = np.random.default_rng(seed)
    specs = sample_eval_ladders(config.eval.ladder_set_size, rng, incline_deg=incline_deg, radius_m=radius_m)
    return [generate_ladder(spec, rng, level=0, seed=derive_seed(seed, k)) for k, spec in enumerate(specs)]


def eval_env(config: RunConfig, terrains: Sequence[TerrainInstance], seed: int, offset: int = 0,
             end_effector: Optional[str] = None, episode_length_s: Optional[float] = None,
             disturbances: Optional[bool] = None, noise: Optional[bool] = None) -> LadderEnv:
    settings = config.eval
    return LadderEnv(config, len(terrains), seed, offset=offset,
                     end_effector=end_effector or settings.end_effector, terrains=terrains, training=False,
                     noise=settings.noise if noise is None else noise,
                     disturbances=settings.disturbances if disturbances is None else disturbances,
                     push_std=settings.push_std_mps, push_period_s=settings.push_period_s,
                     episode_length_s=settings.timeout_s if episode_length_s is None else episode_length_s,
                     dwell_s=settings.dwell_s)


def eval_policy(config: RunConfig, env: LadderEnv, policy_name: Optional[str] = None,
                checkpoint: Optional[str] = None, keyframes=None) -> BasePolicy:
    settings = config.eval
    rngs = spawn_generators(derive_seed(env.seed, 11), env.num_envs, env.offset)
    return make_policy(policy_name or settings.policy, env.model.q0, env.num_envs,
                       checkpoint if checkpoint is not None else settings.checkpoint, rngs=rngs,
                       layout=layout_hash(config.train.use_height_scan), keyframes=keyframes, dt=POLICY_DT)


def run_episodes(env: LadderEnv, policy: BasePolicy) -> tuple[list, np.ndarray, np.ndarray]:
    """
    Runs every environment once until its first episode end. Returns the outcome, the episode
    duration and the climb speed per environment.
    """
    n = env.num_envs
    outcomes: list[Optional[EpisodeOutcome]] = [None] * n
    times = np.zeros(n)
    speeds = np.zeros(n)
    obs = env.last_obs
    max_steps = int(math.ceil(env.episode_length_s / POLICY_DT)) + 1
    for _ in range(max_steps):
        # finished environments stand still until the rest are done
        pending = np.array([o is None for o in outcomes])
        result = env.step(policy.act(obs, env.state), active=pending)
        for i, outcome in result.info["outcomes"].items():
            if outcomes[i] is None:
                outcomes[i] = outcome
                times[i] = env.steps[i] * POLICY_DT
                speeds[i] = result.info["climb"][i]["speed_mps"]
        obs = result.obs
        if all(o is not None for o in outcomes):
            break
    return outcomes, times, speeds


def _run_chunk(config: RunConfig, terrains: list, seed: int, offset: int, end_effector: Optional[str],
               policy_name: Optional[str], checkpoint: Optional[str], keyframes=None,
               disturbances: Optional[bool] = None):
    env = eval_env(config, terrains, seed, offset, end_effector, disturbances=disturbances)
    policy = eval_policy(config, env, policy_name, checkpoint, keyframes)
    outcomes, times, speeds = run_episodes(env, policy)
    return [o.name for o in outcomes], times, speeds


@dataclass
class CellResult:
    incline_deg: float
    radius_m: float
    n: int
    success: float
    term: float
    timeout: float
    mean_time_s: float
    mean_speed_mps: float
    outcomes: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {name: getattr(self, name) for name in GRID_COLUMNS}


def run_cell(config: RunConfig, incline_deg: float, radius_m: float, end_effector: Optional[str] = None,
             policy_name: Optional[str] = None, checkpoint: Optional[str] = None, workers: int = 1,
             keyframes=None, ladders: Optional[Sequence[TerrainInstance]] = None,
             disturbances: Optional[bool] = None) -> CellResult:
    """
    agents_per_cell independent episodes, assigned round-robin to the cell's ladder set. Success
    means standing at the goal for the dwell time before the timeout without a termination.

    `ladders` replaces the sampled ladder set, `keyframes` drives the scripted policy and
    `disturbances` overrides the evaluation setting.
    """
    settings = config.eval
    if ladders is None:
        ladders = eval_ladders(config, incline_deg, radius_m)
    seed = cell_seed(config.seed, incline_deg, radius_m)
    agents = settings.agents_per_cell
    chunk = config.train.env_chunk
    jobs = []
    for offset in range(0, agents, chunk):
        terrains = [ladders[a % len(ladders)] for a in range(offset, min(agents, offset + chunk))]
        jobs.append((config, terrains, seed, offset, end_effector, policy_name, checkpoint, keyframes, disturbances))
    results = starmap(_run_chunk, jobs, workers)
    outcomes = [o for names, _, _ in results for o in names]
    times = np.concatenate([t for _, t, _ in results])
    speeds = np.concatenate([s for _, _, s in results])
    n = len(outcomes)
    success = np.array([o == EpisodeOutcome.REACHED_GOAL.name for o in outcomes])
    term = np.array([o == EpisodeOutcome.TERMINATED.name for o in outcomes])
    timeout = ~success & ~term
    return CellResult(incline_deg=float(incline_deg), radius_m=float(radius_m), n=n,
                      success=float(success.sum()) / n, term=float(term.sum()) / n,
                      timeout=float(timeout.sum()) / n,
                      mean_time_s=float(times[success].mean()) if success.any() else float("nan"),
                      mean_speed_mps=float(speeds[success].mean()) if success.any() else float("nan"),
                      outcomes=outcomes)


def run_grid(config: RunConfig, end_effector: Optional[str] = None, policy_name: Optional[str] = None,
             checkpoint: Optional[str] = None, progress: bool = False) -> pd.DataFrame:
    """One row per (incline, radius) cell; cells are seeded by their own values."""
    cells = [(incline, radius) for incline in config.eval.inclines_deg for radius in config.eval.radii_m]
    rows = []
    for incline, radius in tqdm(cells, desc=f"eval {end_effector or config.eval.end_effector}", disable=not progress):
        result = run_cell(config, incline, radius, end_effector, policy_name, checkpoint, config.run.workers)
        log(f"cell {incline:g} deg / {radius:g} m: success {result.success:.3f}, term {result.term:.3f}",
            level=0 if config.run.verbose else 1)
        rows.append(result.row())
    grid = pd.DataFrame(rows, columns=GRID_COLUMNS)
    grid.attrs["config_hash"] = config_digest(config)
    grid.attrs["checkpoint_hash"] = file_digest(checkpoint if checkpoint is not None else config.eval.checkpoint)
    grid.attrs["end_effector"] = end_effector or config.eval.end_effector
    return grid


def write_grid(grid: pd.DataFrame, out_dir: str, name: str) -> tuple[str, str]:
    """<name>.csv plus a success heatmap <name>.svg; metadata goes to <name>.meta."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    svg_path = os.path.join(out_dir, f"{name}.svg")
    grid.to_csv(csv_path, index=False, columns=GRID_COLUMNS, float_format="%.6g")
    with open(os.path.join(out_dir, f"{name}.meta"), "w") as file:
        for key, value in grid.attrs.items():
            file.write(f"{key} {value}\n")
    plot_grid_heatmap(grid, svg_path, title=name)
    return csv_path, svg_path


def _trajectory_row(t: float, env: LadderEnv, rewards: RewardBreakdown) -> list:
    state, contacts = env.state, env.contacts
    forces = contacts.foot_force[0][:, [0, 2]].ravel()
    parts = [t, state.base_pos[0, 0], state.base_pos[0, 1], state.pitch[0], *state.q[0],
             *contacts.flags()[0].astype(float), *forces, *contacts.hook_engaged[0].astype(float)]
    parts += [float(getattr(rewards, name)[0]) for name in RewardBreakdown.names()]
    return parts


def log_trajectory(config: RunConfig, terrain: TerrainInstance, path: Union[str, os.PathLike],
                   policy_name: Optional[str] = None, checkpoint: Optional[str] = None,
                   end_effector: Optional[str] = None, seed: Optional[int] = None, keyframes=None) -> dict:
    """
    One evaluation episode on `terrain`, one text record per policy step. Returns the episode
    summary: outcome, duration, climb duration (first rung contact to dismount) and climb speed.
    """
    env = eval_env(config, [terrain], config.seed if seed is None else seed, end_effector=end_effector)
    policy = eval_policy(config, env, policy_name, checkpoint, keyframes)
    obs = env.last_obs
    lines = ["# " + " ".join(TRAJECTORY_COLUMNS)]
    summary = None
    for _ in range(int(math.ceil(env.episode_length_s / POLICY_DT)) + 1):
        result = env.step(policy.act(obs, env.state))
        row = _trajectory_row(float(env.steps[0] * POLICY_DT), env, result.info["rewards"])
        lines.append(" ".join(f"{v:.9g}" for v in row))
        obs = result.obs
        if result.done[0]:
            climb = result.info["climb"][0]
            summary = {"outcome": result.info["outcomes"][0].name, "duration_s": float(env.steps[0] * POLICY_DT),
                       "climb_duration_s": climb["duration_s"], "speed_mps": climb["speed_mps"],
                       "return": float(result.info["episode_return"][0])}
            break
    with open(path, "w") as file:
        file.write("\n".join(lines) + "\n")
    return summary


def read_trajectory(path: Union[str, os.PathLike]) -> pd.DataFrame:
    return pd.read_csv(path, sep=r"\s+", comment="#", header=None, names=TRAJECTORY_COLUMNS)


def trajectory_rmse(a: pd.DataFrame, b: pd.DataFrame) -> tuple[float, float]:
    """Position RMSE (m) of the base over the common time span, and pitch RMSE (rad)."""
    n = min(len(a), len(b))
    if n == 0:
        return float("nan"), float("nan")
    pa = a[["base_x", "base_z"]].to_numpy()[:n]
    pb = b[["base_x", "base_z"]].to_numpy()[:n]
    position = math.sqrt(float(np.mean(np.sum((pa - pb) ** 2, axis=1))))
    pitch = math.sqrt(float(np.mean((a["pitch"].to_numpy()[:n] - b["pitch"].to_numpy()[:n]) ** 2)))
    return position, pitch


@dataclass
class Pull:
    time_s: float
    body: str  # "base" or a leg name, the rope tied to that foot
    force: tuple  # (fx, fz) in N, world frame
    duration_s: float

    @staticmethod
    def parse(item) -> "Pull":
        time_s, body, force, duration = item
        body = str(body)
        if body != "base" and body not in LEG_NAMES:
            raise ValueError(f"pull body must be 'base' or one of {LEG_NAMES}, got {body!r}")
        return Pull(float(time_s), body, (float(force[0]), float(force[1])), float(duration))

    def active(self, t: float) -> bool:
        return self.time_s <= t < self.time_s + self.duration_s


def perturbation_test(config: RunConfig, terrain: TerrainInstance, pulls: Sequence, policy_name: Optional[str] = None,
                      checkpoint: Optional[str] = None, end_effector: Optional[str] = None,
                      recovery_s: float = 2.0, keyframes=None) -> dict:
    """
    Runs one episode while applying external pulls on the base or a foot. Reports per-foot normal
    force traces, hook tension events (entries into negative normal force), hook breakaways and a
    per-pull flag: "fell" if the episode terminated before the next pull started (or before the end
    of the run), otherwise "recovered".
    """
    pulls = sorted((p if isinstance(p, Pull) else Pull.parse(p) for p in pulls), key=lambda p: p.time_s)
    end = max([p.time_s + p.duration_s for p in pulls], default=0.0) + recovery_s
    env = eval_env(config, [terrain], config.seed, end_effector=end_effector, episode_length_s=end,
                   disturbances=False, noise=False)
    policy = eval_policy(config, env, policy_name, checkpoint, keyframes)
    base_force = env.sim.external_base_force.copy()
    foot_forces = env.sim.external_foot_forces.copy()

    obs = env.last_obs
    times, normal_trace, base_trace = [], [], []
    tension_events = np.zeros(4, dtype=int)
    in_tension = np.zeros(4, dtype=bool)
    breakaways_before = env.contacts.hook_breakaways[0].copy()
    terminated_at = None
    t = 0.0
    while t < end - 1e-9:
        env.sim.external_base_force[0] = base_force[0]
        env.sim.external_foot_forces[0] = foot_forces[0]
        for pull in pulls:
            if pull.active(t):
                vector = np.array([pull.force[0], 0.0, pull.force[1]])
                if pull.body == "base":
                    env.sim.external_base_force[0] += vector
                else:
                    env.sim.external_foot_forces[0, LEG_NAMES.index(pull.body)] += vector
        result = env.step(policy.act(obs, env.state))
        t = float(env.steps[0] * POLICY_DT)
        normal = env.contacts.foot_normal_force[0].copy()
        tension = normal < 0
        tension_events += tension & ~in_tension
        in_tension = tension
        times.append(t)
        normal_trace.append(normal)
        base_trace.append(env.state.base_pos[0].copy())
        obs = result.obs
        if result.terminated[0]:
            terminated_at = t
            break

    flags = []
    for k, pull in enumerate(pulls):
        window_end = pulls[k + 1].time_s if k + 1 < len(pulls) else end
        fell = terminated_at is not None and terminated_at <= window_end + 1e-9
        flags.append("fell" if fell else "recovered")
    breakaways = env.contacts.hook_breakaways[0] - breakaways_before
    if breakaways.sum():
        log(f"{int(breakaways.sum())} hook breakaway(s) during the pull schedule")
    traces = pd.DataFrame(np.array(normal_trace).reshape(-1, 4), columns=[f"Fn_{leg}" for leg in LEG_NAMES])
    traces.insert(0, "t", times)
    base = np.array(base_trace).reshape(-1, 2)
    traces["base_x"] = base[:, 0]
    traces["base_z"] = base[:, 1]
    return {"pulls": pulls, "flags": flags, "tension_events": dict(zip(LEG_NAMES, tension_events.tolist())),
            "breakaways": dict(zip(LEG_NAMES, breakaways.tolist())), "terminated_at": terminated_at,
            "traces": traces}


def write_perturbation_report(report: dict, out_dir: str, name: str = "perturb") -> str:
    os.makedirs(out_dir, exist_ok=True)
    report["traces"].to_csv(os.path.join(out_dir, f"{name}_forces.csv"), index=False, float_format="%.6g")
    rows = [{"time_s": p.time_s, "body": p.body, "fx": p.force[0], "fz": p.force[1], "duration_s": p.duration_s,
             "result": flag} for p, flag in zip(report["pulls"], report["flags"])]
    summary_path = os.path.join(out_dir, f"{name}.csv")
    pd.DataFrame(rows, columns=["time_s", "body", "fx", "fz", "duration_s", "result"]).to_csv(summary_path,
                                                                                              index=False)
    with open(os.path.join(out_dir, f"{name}_events.txt"), "w") as file:
        for leg in LEG_NAMES:
            file.write(f"{leg} tension_events {report['tension_events'][leg]} breakaways {report['breakaways'][leg]}\n")
    return summary_path
