import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from checkpoint import Checkpoint, save_checkpoint, load_checkpoint, generator_state, restore_generator, \
    save_snapshot, load_snapshot
from config import RunConfig, TrainConfig
from errors import LayoutMismatchError, CheckpointError
from ladder_env import LadderEnv
from models import ObservationBundle, PolicyRole, NUM_JOINTS
from nn import Module, MLP, Linear, GRUCell, Adam, clip_grad_norm
from obs_reward import PROPRIO_LAYOUT, IMU_LAYOUT, SCAN_LAYOUT, PRIVILEGED_LAYOUT, STUDENT_LAYOUT, layout_size, \
    layout_hash, layout_ranges, CONSTRAINT_FAMILIES
from util import log, starmap, derive_seed

ACTION_SCALE = 2.0
LOG_2PI = math.log(2.0 * math.pi)
TEACHER_GROUPS = ("proprio", "imu", "height_scan", "privileged")


def teacher_input_sizes(use_height_scan: bool = True) -> dict[str, int]:
    return {"proprio": layout_size(PROPRIO_LAYOUT), "imu": layout_size(IMU_LAYOUT),
            "height_scan": layout_size(SCAN_LAYOUT) if use_height_scan else 0,
            "privileged": layout_size(PRIVILEGED_LAYOUT)}


class PolicyNet(Module):
    """
    Feed-forward actor-critic. The IMU history goes through its own encoder; the latent is concatenated
    with the remaining groups and fed to a shared trunk with a Gaussian actor head and a value head.
    The action mean is a joint-target offset squashed to +-ACTION_SCALE rad around the default pose.
    """

    def __init__(self, sizes: dict[str, int], config: TrainConfig = TrainConfig(),
                 rng: Optional[np.random.Generator] = None, num_actions: int = NUM_JOINTS, layout: str = ""):
        super().__init__()
        self.sizes = dict(sizes)
        self.num_actions = num_actions
        self.layout_hash = layout
        self.imu_hidden = tuple(int(h) for h in config.imu_hidden)
        self.trunk_hidden = tuple(int(h) for h in config.trunk_hidden)
        imu_dim = self.sizes.get("imu", 0)
        self.imu_encoder = None
        latent = 0
        if imu_dim > 0:
            self.imu_encoder = self.add_child("imu_encoder", MLP((imu_dim,) + self.imu_hidden, rng))
            latent = self.imu_hidden[-1]
        trunk_in = latent + sum(size for name, size in self.sizes.items() if name != "imu")
        self.trunk = self.add_child("trunk", MLP((trunk_in,) + self.trunk_hidden, rng))
        self.actor = self.add_child("actor", Linear(self.trunk_hidden[-1], num_actions, rng, gain=0.01))
        self.critic = self.add_child("critic", Linear(self.trunk_hidden[-1], 1, rng, gain=1.0))
        self.add_param("log_std", np.full(num_actions, float(config.init_log_std)))
        self._head = None
        self._imu_start = 0

    def inputs(self, obs: Union[ObservationBundle, dict]) -> dict[str, np.ndarray]:
        if isinstance(obs, ObservationBundle):
            if self.layout_hash and obs.layout_hash != self.layout_hash:
                raise LayoutMismatchError(self.layout_hash, obs.layout_hash)
            return {name: obs.group(name) for name in self.sizes}
        return obs

    def forward(self, obs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(action mean, log std broadcast to the mean, value)."""
        inputs = self.inputs(obs)
        parts = []
        self._imu_start = 0
        for name in self.sizes:
            if name == "imu" and self.imu_encoder is not None:
                self._imu_start = sum(p.shape[-1] for p in parts)
                parts.append(self.imu_encoder.forward(inputs["imu"]))
            elif self.sizes[name] > 0:
                parts.append(inputs[name])
        hidden = self.trunk.forward(np.concatenate(parts, axis=-1))
        self._head = np.tanh(self.actor.forward(hidden))
        mean = ACTION_SCALE * self._head
        value = self.critic.forward(hidden)[..., 0]
        log_std = np.broadcast_to(self.params["log_std"], mean.shape)
        return mean, log_std, value

    def backward(self, d_mean: np.ndarray, d_log_std: np.ndarray, d_value: np.ndarray):
        d_head = d_mean * ACTION_SCALE * (1.0 - self._head ** 2)
        d_hidden = self.actor.backward(d_head) + self.critic.backward(d_value[..., None])
        d_trunk_in = self.trunk.backward(d_hidden)
        self.grads["log_std"] += np.asarray(d_log_std).reshape(-1, self.num_actions).sum(axis=0)
        if self.imu_encoder is not None:
            start = self._imu_start
            self.imu_encoder.backward(d_trunk_in[..., start:start + self.imu_hidden[-1]])

    def describe(self) -> dict[str, str]:
        return {"sizes": ",".join(f"{k}={v}" for k, v in self.sizes.items()),
                "imu_hidden": ",".join(map(str, self.imu_hidden)),
                "trunk_hidden": ",".join(map(str, self.trunk_hidden)), "num_actions": str(self.num_actions)}


class StudentNet(Module):
    """
    Recurrent student. A GRU belief encoder reads the whole noisy student observation; its state is
    decoded back into the privileged vector and, together with the proprioception and the encoded IMU
    history, drives the actor.
    """

    def __init__(self, sizes: dict[str, int], privileged_dim: int, config: TrainConfig = TrainConfig(),
                 rng: Optional[np.random.Generator] = None, num_actions: int = NUM_JOINTS, layout: str = ""):
        super().__init__()
        self.sizes = dict(sizes)  # ordered slices of the student vector, e.g. proprio, imu, ladder
        self.privileged_dim = privileged_dim
        self.num_actions = num_actions
        self.layout_hash = layout
        self.belief_hidden = int(config.belief_hidden)
        self.imu_hidden = tuple(int(h) for h in config.imu_hidden)
        self.trunk_hidden = tuple(int(h) for h in config.trunk_hidden)
        self.input_dim = sum(self.sizes.values())
        self.slices, start = {}, 0
        for name, size in self.sizes.items():
            self.slices[name] = slice(start, start + size)
            start += size
        imu_dim = self.sizes.get("imu", 0)
        self.imu_encoder = None
        latent = 0
        if imu_dim > 0:
            self.imu_encoder = self.add_child("imu_encoder", MLP((imu_dim,) + self.imu_hidden, rng))
            latent = self.imu_hidden[-1]
        self.latent = latent
        self.belief = self.add_child("belief", GRUCell(self.input_dim, self.belief_hidden, rng))
        self.decoder = self.add_child("decoder", MLP((self.belief_hidden, self.belief_hidden, privileged_dim), rng,
                                                     activate_output=False, output_gain=1.0))
        trunk_in = self.sizes.get("proprio", 0) + latent + self.belief_hidden
        self.trunk = self.add_child("trunk", MLP((trunk_in,) + self.trunk_hidden, rng))
        self.actor = self.add_child("actor", Linear(self.trunk_hidden[-1], num_actions, rng, gain=0.01))
        self._head = None
        self._shape = None

    def initial_state(self, n: int) -> np.ndarray:
        return np.zeros((n, self.belief_hidden))

    def _actor_forward(self, obs: np.ndarray, belief: np.ndarray) -> np.ndarray:
        parts = []
        if "proprio" in self.slices:
            parts.append(obs[..., self.slices["proprio"]])
        if self.imu_encoder is not None:
            parts.append(self.imu_encoder.forward(obs[..., self.slices["imu"]]))
        parts.append(belief)
        self._head = np.tanh(self.actor.forward(self.trunk.forward(np.concatenate(parts, axis=-1))))
        return ACTION_SCALE * self._head

    def act(self, obs: np.ndarray, hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One control step: (action mean, next hidden state)."""
        hidden = self.belief.step(obs, hidden)
        return self._actor_forward(obs, hidden), hidden

    def forward_sequence(self, obs: np.ndarray, h0: np.ndarray, resets: Optional[np.ndarray] = None):
        """obs (T, N, D) -> action means (T, N, A), decoded privileged (T, N, P), beliefs (T, N, H)."""
        steps, n = obs.shape[:2]
        self._shape = (steps, n)
        beliefs = self.belief.forward_sequence(obs, h0, resets)
        flat_obs = obs.reshape(steps * n, -1)
        flat_beliefs = beliefs.reshape(steps * n, -1)
        decoded = self.decoder.forward(flat_beliefs)
        mean = self._actor_forward(flat_obs, flat_beliefs)
        return mean.reshape(steps, n, -1), decoded.reshape(steps, n, -1), beliefs

    def backward_sequence(self, d_mean: np.ndarray, d_decoded: Optional[np.ndarray] = None):
        steps, n = self._shape
        d_head = d_mean.reshape(steps * n, -1) * ACTION_SCALE * (1.0 - self._head ** 2)
        d_trunk_in = self.trunk.backward(self.actor.backward(d_head))
        d_belief = d_trunk_in[:, -self.belief_hidden:]
        if self.imu_encoder is not None:
            start = self.sizes.get("proprio", 0)
            self.imu_encoder.backward(d_trunk_in[:, start:start + self.latent])
        if d_decoded is not None:
            d_belief = d_belief + self.decoder.backward(d_decoded.reshape(steps * n, -1))
        self.belief.backward_sequence(d_belief.reshape(steps, n, -1))

    def describe(self) -> dict[str, str]:
        return {"sizes": ",".join(f"{k}={v}" for k, v in self.sizes.items()),
                "privileged_dim": str(self.privileged_dim), "belief_hidden": str(self.belief_hidden),
                "imu_hidden": ",".join(map(str, self.imu_hidden)),
                "trunk_hidden": ",".join(map(str, self.trunk_hidden)), "num_actions": str(self.num_actions)}


def student_input_sizes() -> dict[str, int]:
    return {"proprio": layout_size(PROPRIO_LAYOUT), "imu": layout_size(IMU_LAYOUT),
            "ladder": layout_size(STUDENT_LAYOUT) - layout_size(PROPRIO_LAYOUT) - layout_size(IMU_LAYOUT)}


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> np.ndarray:
    return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)


def compute_gae(rewards, values, terminated, timed_out, timeout_values, last_values, gamma, lam):
    """
    Advantages and returns over (T, N) rollouts. A terminated step bootstraps with 0, a timed out step
    with the critic's value of its final observation, the rollout cut with last_values.
    """
    steps = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    carry = np.zeros_like(last_values)
    for t in reversed(range(steps)):
        next_value = last_values if t == steps - 1 else values[t + 1]
        next_value = np.where(timed_out[t], timeout_values[t], next_value)
        next_value = np.where(terminated[t], 0.0, next_value)
        done = terminated[t] | timed_out[t]
        delta = rewards[t] + gamma * next_value - values[t]
        carry = delta + gamma * lam * np.where(done, 0.0, carry)
        advantages[t] = carry
    return advantages, advantages + values


def discounted_cost_to_go(costs: np.ndarray, done: np.ndarray, gamma: float) -> np.ndarray:
    """costs (T, N, K); no bootstrap at the rollout cut."""
    out = np.zeros_like(costs)
    carry = np.zeros(costs.shape[1:])
    for t in reversed(range(costs.shape[0])):
        carry = costs[t] + gamma * np.where(done[t][:, None], 0.0, carry)
        out[t] = carry
    return out


@dataclass
class RolloutBatch:
    inputs: dict[str, np.ndarray]  # (B, D) per group
    actions: np.ndarray  # (B, A)
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    cost_advantages: np.ndarray  # (B, K)
    cost_returns: np.ndarray  # (K,) average per-step constraint cost, the J_c the barrier acts on
    stats: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.actions.shape[0]


def make_batch(inputs, actions, logp, values, rewards, terminated, timed_out, timeout_values, last_values, costs,
               gamma, lam, stats=None) -> RolloutBatch:
    """Flattens (T, N, ...) rollout arrays into a batch with GAE and constraint advantages."""
    advantages, returns = compute_gae(rewards, values, terminated, timed_out, timeout_values, last_values, gamma, lam)
    cost_to_go = discounted_cost_to_go(costs, terminated | timed_out, gamma)
    flat = lambda a: a.reshape((-1,) + a.shape[2:])
    cost_to_go = flat(cost_to_go)
    cost_advantages = (1.0 - gamma) * (cost_to_go - cost_to_go.mean(axis=0)) if gamma < 1 else \
        cost_to_go - cost_to_go.mean(axis=0)
    return RolloutBatch(inputs={k: flat(v) for k, v in inputs.items()}, actions=flat(actions), old_logp=flat(logp),
                        advantages=flat(advantages), returns=flat(returns), cost_advantages=cost_advantages,
                        cost_returns=flat(costs).mean(axis=0), stats=stats or {})


def surrogate_gradient(logp, old_logp, advantages, clip) -> tuple[np.ndarray, np.ndarray]:
    """Clipped surrogate loss -mean(min(r A, clip(r) A)) and its gradient w.r.t. logp."""
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    inside = (ratio >= 1.0 - clip) & (ratio <= 1.0 + clip)
    active = (surr1 <= surr2) | inside
    grad = np.where(active, -advantages * ratio, 0.0) / len(logp)
    return -np.mean(np.minimum(surr1, surr2)), grad


def barrier_terms(slack: np.ndarray, thresholds: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """
    log(slack), continued linearly below margin * threshold so that infeasible constraint returns
    still get a finite value and a gradient. Returns (phi, dphi/dslack).
    """
    m = np.maximum(margin * thresholds, 1e-8)
    safe = np.maximum(slack, m)
    phi = np.where(slack >= m, np.log(safe), np.log(m) + (slack - m) / m)
    dphi = np.where(slack >= m, 1.0 / safe, 1.0 / m)
    return phi, dphi


def barrier_weight(config: TrainConfig) -> float:
    t = config.barrier_t
    return 1.0 / t if t > 0 and math.isfinite(t) else 0.0


def ppo_ipo_update(net: PolicyNet, optimizer: Adam, batch: RolloutBatch, thresholds: Sequence[float],
                   config: TrainConfig, rng: np.random.Generator, lr: Optional[float] = None) -> dict:
    """
    Clipped PPO with entropy bonus and value regression, plus (1/t) * sum_j log(d_j - J_c_j) on the
    surrogate estimate J_c_j = mean cost + mean(ratio * cost advantage). A non-finite loss skips the
    minibatch and halves the learning rate once.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    weight = barrier_weight(config)
    advantages = batch.advantages
    if config.normalize_advantages and batch.size > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "barrier": 0.0, "approx_kl": 0.0,
            "clip_fraction": 0.0}
    updates = skipped = 0
    num_mb = max(1, min(config.mini_batches, batch.size))
    for _ in range(config.update_epochs):
        order = rng.permutation(batch.size)
        for idx in np.array_split(order, num_mb):
            inputs = {name: value[idx] for name, value in batch.inputs.items()}
            actions = batch.actions[idx]
            net.zero_grad()
            mean, log_std, value = net.forward(inputs)
            logp = gaussian_log_prob(actions, mean, log_std)
            policy_loss, d_logp = surrogate_gradient(logp, batch.old_logp[idx], advantages[idx], config.clip)
            ratio = np.exp(logp - batch.old_logp[idx])
            b = len(idx)

            barrier = 0.0
            if weight > 0:
                estimate = batch.cost_returns + np.mean(ratio[:, None] * batch.cost_advantages[idx], axis=0)
                phi, dphi = barrier_terms(thresholds - estimate, thresholds, config.barrier_margin)
                barrier = -weight * float(np.sum(phi))
                d_logp = d_logp + weight * (ratio[:, None] * batch.cost_advantages[idx] @ dphi) / b

            entropy = float(np.mean(gaussian_entropy(log_std)))
            value_error = value - batch.returns[idx]
            value_loss = float(np.mean(value_error ** 2))
            loss = policy_loss - config.entropy_coef * entropy + config.value_coef * value_loss + barrier
            if not np.isfinite(loss):
                skipped += 1
                log(f"non-finite loss {loss}, minibatch skipped")
                if optimizer.lr_scale == 1.0:
                    optimizer.lr_scale = 0.5
                    log("learning rate halved")
                continue

            inv_var = np.exp(-2.0 * log_std)
            diff = actions - mean
            d_mean = d_logp[:, None] * diff * inv_var
            d_log_std = d_logp[:, None] * (diff * diff * inv_var - 1.0) - config.entropy_coef / b
            d_value = 2.0 * config.value_coef * value_error / b
            net.backward(d_mean, d_log_std, d_value)
            grads = net.gradients()
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads, lr)

            updates += 1
            sums["policy_loss"] += policy_loss
            sums["value_loss"] += value_loss
            sums["entropy"] += entropy
            sums["barrier"] += barrier
            sums["approx_kl"] += float(np.mean(batch.old_logp[idx] - logp))
            sums["clip_fraction"] += float(np.mean(np.abs(ratio - 1.0) > config.clip))
    stats = {k: v / max(updates, 1) for k, v in sums.items()}
    stats["skipped"] = skipped
    for j, value in enumerate(batch.cost_returns):
        name = CONSTRAINT_FAMILIES[j] if len(batch.cost_returns) == len(CONSTRAINT_FAMILIES) else str(j)
        stats[f"J_{name}"] = float(value)
    return stats


def threshold_schedule(config: TrainConfig, iteration: int, total: int, current: Optional[np.ndarray] = None,
                       cost_returns: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Constraint thresholds d_j. "linear" anneals from threshold_start to threshold_end over the first
    threshold_anneal_fraction of training; "performance" tightens by the same per-iteration step only
    for families whose constraint return is already below the current threshold.
    """
    start = np.asarray(config.threshold_start, dtype=float)
    end = np.asarray(config.threshold_end, dtype=float)
    span = max(config.threshold_anneal_fraction * total, 1.0)
    if config.threshold_schedule == "performance":
        if current is None or cost_returns is None:
            return start.copy()
        step = (start - end) / span
        tightened = np.maximum(end, current - step)
        return np.where(np.asarray(cost_returns) < current, tightened, current)
    f = min(1.0, iteration / span)
    return start + f * (end - start)


def learning_rate(config: TrainConfig, iteration: int, total: int, base: Optional[float] = None) -> float:
    base = config.learning_rate if base is None else base
    if not config.lr_decay or total <= 1:
        return base
    return base * (1.0 - iteration / total)


@dataclass
class ChunkTrajectory:
    inputs: dict[str, np.ndarray]
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    terminated: np.ndarray
    timed_out: np.ndarray
    timeout_values: np.ndarray
    last_values: np.ndarray
    episodes: list = field(default_factory=list)  # (outcome, return, steps, level) per finished episode
    diverged: int = 0


def _collect_chunk(env: LadderEnv, net: PolicyNet, steps: int, deterministic: bool = False):
    n = env.num_envs
    obs = env.last_obs
    groups = {name: [] for name in net.sizes}
    actions, logps, values, rewards, costs = [], [], [], [], []
    terminated, timed_out, timeout_values = [], [], []
    episodes, diverged = [], 0
    for _ in range(steps):
        inputs = net.inputs(obs)
        mean, log_std, value = net.forward(inputs)
        if deterministic:
            action = mean.copy()
        else:
            noise = np.stack([rng.standard_normal(net.num_actions) for rng in env.rngs])
            action = mean + np.exp(log_std) * noise
        result = env.step(env.model.q0 + action)
        final_values = np.zeros(n)
        if result.timed_out.any():
            final_values = net.forward(net.inputs(result.final_obs))[2]
        for name in groups:
            groups[name].append(inputs[name])
        actions.append(action)
        logps.append(gaussian_log_prob(action, mean, log_std))
        values.append(value)
        rewards.append(result.reward)
        costs.append(result.costs)
        terminated.append(result.terminated)
        timed_out.append(result.timed_out)
        timeout_values.append(np.where(result.timed_out, final_values, 0.0))
        for k, outcome in enumerate(result.info["outcomes"].values()):
            episodes.append((outcome.name, float(result.info["episode_return"][k]),
                             int(result.info["episode_steps"][k]), int(result.info["levels"][k])))
        diverged += result.info["diverged"]
        obs = result.obs
    env.last_obs = obs
    last_values = net.forward(net.inputs(obs))[2]
    trajectory = ChunkTrajectory(inputs={k: np.stack(v) for k, v in groups.items()}, actions=np.stack(actions),
                                 logp=np.stack(logps), values=np.stack(values), rewards=np.stack(rewards),
                                 costs=np.stack(costs), terminated=np.stack(terminated),
                                 timed_out=np.stack(timed_out), timeout_values=np.stack(timeout_values),
                                 last_values=last_values, episodes=episodes, diverged=diverged)
    return env, trajectory


def rollout_collect(envs: list[LadderEnv], net: PolicyNet, steps: int, config: TrainConfig, workers: int = 1,
                    deterministic: bool = False) -> RolloutBatch:
    """
    Steps every chunk for exactly `steps` policy steps and returns the flattened batch with GAE.
    Chunks are independent, so the result does not depend on the number of workers.
    """
    results = starmap(_collect_chunk, [(env, net, steps, deterministic) for env in envs], workers)
    envs[:] = [env for env, _ in results]
    parts = [traj for _, traj in results]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts], axis=1)
    inputs = {name: np.concatenate([p.inputs[name] for p in parts], axis=1) for name in parts[0].inputs}
    last_values = np.concatenate([p.last_values for p in parts])
    episodes = [e for p in parts for e in p.episodes]
    stats = {"episodes": episodes, "diverged": sum(p.diverged for p in parts),
             "levels": np.concatenate([env.levels for env in envs]), "mean_reward": float(cat("rewards").mean())}
    return make_batch(inputs, cat("actions"), cat("logp"), cat("values"), cat("rewards"), cat("terminated"),
                      cat("timed_out"), cat("timeout_values"), last_values, cat("costs"), config.discount,
                      config.gae_lambda, stats)


def make_envs(config: RunConfig, num_envs: int, seed: int, **kwargs) -> list[LadderEnv]:
    """Fixed-size chunks of train.env_chunk environments; the last chunk takes the remainder."""
    chunk = config.train.env_chunk
    envs = []
    for offset in range(0, num_envs, chunk):
        envs.append(LadderEnv(config, min(chunk, num_envs - offset), seed, offset=offset, **kwargs))
    return envs


def episode_summary(episodes: list) -> dict:
    if not episodes:
        return {"episodes": 0, "return": float("nan"), "goal_rate": float("nan"), "term_rate": float("nan"),
                "timeout_rate": float("nan")}
    outcomes = [e[0] for e in episodes]
    n = len(episodes)
    return {"episodes": n, "return": float(np.mean([e[1] for e in episodes])),
            "goal_rate": outcomes.count("REACHED_GOAL") / n, "term_rate": outcomes.count("TERMINATED") / n,
            "timeout_rate": outcomes.count("TIMED_OUT") / n}


def _append_metrics(path: Optional[str], row: dict, first: bool):
    if path is None:
        return
    pd.DataFrame([row]).to_csv(path, mode="w" if first else "a", header=first, index=False)


def teacher_checkpoint(net: PolicyNet, optimizer: Adam, config: RunConfig, iteration: int,
                       thresholds: np.ndarray, levels: np.ndarray,
                       envs: Optional[list[LadderEnv]] = None) -> Checkpoint:
    tensors = {f"net.{k}": v for k, v in net.named_parameters()}
    tensors.update(optimizer.state())
    tensors["ipo.thresholds"] = np.asarray(thresholds, dtype=float)
    tensors["curriculum.levels"] = np.asarray(levels, dtype=float)
    meta = {"seed": str(config.seed), "iteration": str(iteration), **net.describe()}
    for env in envs or []:
        for env_id, rng in zip(env.env_ids, env.rngs):
            meta[f"rng.{int(env_id)}"] = generator_state(rng)
    return Checkpoint(layout_hash=net.layout_hash, role=PolicyRole.TEACHER, tensors=tensors, meta=meta)


def _save_teacher(path: str, net: PolicyNet, optimizer: Adam, config: RunConfig, iteration: int,
                  thresholds: np.ndarray, envs: list[LadderEnv]):
    levels = np.concatenate([env.levels for env in envs])
    save_checkpoint(teacher_checkpoint(net, optimizer, config, iteration, thresholds, levels, envs), path)
    save_snapshot(envs, path)


def resume_teacher(path: str, config: RunConfig, net: PolicyNet, optimizer: Adam,
                   end_effector: Optional[str] = None) -> tuple[int, np.ndarray, list[LadderEnv]]:
    """
    Loads weights and optimizer moments into `net` and `optimizer` and returns the iteration to
    continue from, the constraint thresholds and the environments. The pickled environment snapshot
    beside the checkpoint continues the run exactly; without it the environments are rebuilt from the
    saved curriculum levels and random streams and start fresh episodes.
    """
    train = config.train
    checkpoint = load_checkpoint(path, expected_role=PolicyRole.TEACHER, expected_layout=net.layout_hash)
    try:
        net.load_parameters(checkpoint.group("net"))
        optimizer.load_state(checkpoint.tensors)
        start = int(checkpoint.meta["iteration"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path} cannot resume training: {e}") from None
    thresholds = checkpoint.tensors.get("ipo.thresholds")
    if thresholds is None:
        thresholds = threshold_schedule(train, start, train.epochs)
    envs = load_snapshot(path)
    if envs is not None and sum(env.num_envs for env in envs) == train.num_envs:
        return start, thresholds, envs

    log(f"no environment snapshot for {path}, rebuilding environments from saved levels and random streams")
    envs = make_envs(config, train.num_envs, config.seed, end_effector=end_effector)
    levels = checkpoint.tensors.get("curriculum.levels")
    for env in envs:
        for i, env_id in enumerate(env.env_ids):
            if levels is not None and env_id < len(levels):
                env.curriculum[i] = replace(env.curriculum[i], level=int(levels[env_id]))
            state = checkpoint.meta.get(f"rng.{int(env_id)}")
            if state is not None:
                env.rngs[i] = restore_generator(state)
        env.reset_envs(np.arange(env.num_envs))
        env.last_obs = env.observe()
    return start, thresholds, envs


def _parse_sizes(text: str) -> dict[str, int]:
    return {k: int(v) for k, v in (item.split("=") for item in text.split(","))}


def _parse_hidden(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def load_teacher(path: str, config: TrainConfig = TrainConfig(), expected_layout: Optional[str] = None) -> PolicyNet:
    checkpoint = load_checkpoint(path, expected_role=PolicyRole.TEACHER, expected_layout=expected_layout)
    return teacher_from_checkpoint(checkpoint, config)


def teacher_from_checkpoint(checkpoint: Checkpoint, config: TrainConfig = TrainConfig()) -> PolicyNet:
    meta = checkpoint.meta
    try:
        net_config = TrainConfig(imu_hidden=_parse_hidden(meta["imu_hidden"]),
                                 trunk_hidden=_parse_hidden(meta["trunk_hidden"]), init_log_std=config.init_log_std)
        net = PolicyNet(_parse_sizes(meta["sizes"]), net_config, None, int(meta["num_actions"]),
                        checkpoint.layout_hash)
        net.load_parameters(checkpoint.group("net"))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not describe a teacher network: {e}") from None
    return net


def train_teacher(config: RunConfig, run_dir: Optional[str] = None, progress: bool = False,
                  end_effector: Optional[str] = None, resume: Optional[str] = None) -> tuple[PolicyNet, pd.DataFrame]:
    """
    Constrained PPO over the curriculum; writes metrics.csv and ckpt/ under run_dir when given.
    With `resume` training continues from that teacher checkpoint's iteration.
    """
    train = config.train
    seed = config.seed
    use_scan = train.use_height_scan
    layout = layout_hash(use_scan)
    net = PolicyNet(teacher_input_sizes(use_scan), train, np.random.default_rng(derive_seed(seed, 1)),
                    layout=layout)
    optimizer = Adam(net.parameters(), train.learning_rate)
    if resume:
        start, thresholds, envs = resume_teacher(resume, config, net, optimizer, end_effector)
        log(f"resuming teacher training at iteration {start} from {resume}")
    else:
        start = 0
        thresholds = threshold_schedule(train, 0, train.epochs)
        envs = make_envs(config, train.num_envs, seed, end_effector=end_effector)
    metrics_path = ckpt_dir = None
    if run_dir:
        metrics_path = os.path.join(run_dir, "metrics.csv")
        ckpt_dir = os.path.join(run_dir, "ckpt")
        os.makedirs(ckpt_dir, exist_ok=True)
    header = metrics_path is not None and not (resume and os.path.exists(metrics_path))

    rows = []
    bar = tqdm(range(start, train.epochs), desc="teacher", disable=not progress)
    for it in bar:
        if train.threshold_schedule == "linear":
            thresholds = threshold_schedule(train, it, train.epochs)
        batch = rollout_collect(envs, net, train.steps_per_batch, train, config.run.workers)
        lr = learning_rate(train, it, train.epochs)
        stats = ppo_ipo_update(net, optimizer, batch, thresholds, train, np.random.default_rng(
            derive_seed(seed, 2, it)), lr)
        summary = episode_summary(batch.stats["episodes"])
        row = {"iter": it, "return": summary["return"], "mean_reward": batch.stats["mean_reward"],
               "goal_rate": summary["goal_rate"], "term_rate": summary["term_rate"],
               "timeout_rate": summary["timeout_rate"], "episodes": summary["episodes"],
               **{f"J_{name}": float(batch.cost_returns[j]) for j, name in enumerate(CONSTRAINT_FAMILIES)},
               **{f"d_{name}": float(thresholds[j]) for j, name in enumerate(CONSTRAINT_FAMILIES)},
               "level_mean": float(np.mean(batch.stats["levels"])), "policy_loss": stats["policy_loss"],
               "value_loss": stats["value_loss"], "entropy": stats["entropy"], "barrier": stats["barrier"],
               "approx_kl": stats["approx_kl"], "skipped": stats["skipped"], "diverged": batch.stats["diverged"],
               "lr": lr * optimizer.lr_scale}
        rows.append(row)
        _append_metrics(metrics_path, row, header and it == start)
        bar.set_postfix(ret=f"{summary['return']:.2f}", level=f"{row['level_mean']:.2f}")
        if train.threshold_schedule == "performance":
            thresholds = threshold_schedule(train, it, train.epochs, thresholds, batch.cost_returns)
        if ckpt_dir and train.checkpoint_every > 0 and (it + 1) % train.checkpoint_every == 0:
            _save_teacher(os.path.join(ckpt_dir, f"teacher_{it + 1:05d}.ckpt"), net, optimizer, config, it + 1,
                          thresholds, envs)
    if ckpt_dir:
        _save_teacher(os.path.join(ckpt_dir, "teacher.ckpt"), net, optimizer, config, train.epochs, thresholds, envs)
    return net, pd.DataFrame(rows)


@dataclass
class DistillSequence:
    obs: np.ndarray  # (T, N, D) noisy student observations
    h0: np.ndarray  # (N, H) belief at the sequence start
    resets: np.ndarray  # (T, N) episode starts inside the sequence
    teacher_actions: np.ndarray  # (T, N, A)
    privileged: np.ndarray  # (T, N, P)
    episodes: list = field(default_factory=list)


def distill_step(student: StudentNet, optimizer: Adam, seq: DistillSequence, beta: float, max_grad_norm: float = 1.0,
                 lr: Optional[float] = None) -> dict:
    """
    One truncated backprop-through-time update on ||a_student - a_teacher||^2 + beta * ||decoded - privileged||^2.
    With beta == 0 the decoder receives no gradient at all.
    """
    student.zero_grad()
    mean, decoded, _ = student.forward_sequence(seq.obs, seq.h0, seq.resets)
    count = seq.obs.shape[0] * seq.obs.shape[1]
    diff = mean - seq.teacher_actions
    imitation = float(np.sum(diff * diff) / count)
    error = decoded - seq.privileged
    reconstruction = float(np.sum(error * error) / count)
    pose = slice(*layout_ranges(PRIVILEGED_LAYOUT)["ladder_pose"])
    pose_error = float(np.mean(error[..., pose] ** 2)) if error.shape[-1] == layout_size(PRIVILEGED_LAYOUT) \
        else float("nan")
    loss = imitation + beta * reconstruction
    stats = {"loss": loss, "imitation": imitation, "reconstruction": reconstruction, "pose_error": pose_error,
             "skipped": 0}
    if not np.isfinite(loss):
        log(f"non-finite distillation loss {loss}, update skipped")
        stats["skipped"] = 1
        if optimizer.lr_scale == 1.0:
            optimizer.lr_scale = 0.5
        return stats
    d_decoded = 2.0 * beta * error / count if beta > 0 else None
    student.backward_sequence(2.0 * diff / count, d_decoded)
    grads = student.gradients()
    clip_grad_norm(grads, max_grad_norm)
    optimizer.step(grads, lr)
    return stats


def _collect_student_chunk(env: LadderEnv, teacher: PolicyNet, student: StudentNet, steps: int, mode: str):
    n = env.num_envs
    if env.policy_memory is None:
        env.policy_memory = student.initial_state(n)
    h = env.policy_memory.copy()
    h0 = h.copy()
    obs = env.last_obs
    keep = np.ones(n)
    seq_obs, resets, teacher_actions, privileged, episodes = [], [], [], [], []
    for _ in range(steps):
        resets.append(1.0 - keep)
        teacher_mean = teacher.forward(teacher.inputs(obs))[0]
        student_mean, h = student.act(obs.student, h * keep[:, None])
        seq_obs.append(obs.student)
        teacher_actions.append(teacher_mean)
        privileged.append(obs.privileged)
        action = student_mean if mode == "dagger" else teacher_mean
        result = env.step(env.model.q0 + action)
        keep = np.where(result.done, 0.0, 1.0)
        for k, outcome in enumerate(result.info["outcomes"].values()):
            episodes.append((outcome.name, float(result.info["episode_return"][k]),
                             int(result.info["episode_steps"][k]), int(result.info["levels"][k])))
        obs = result.obs
    env.last_obs = obs
    env.policy_memory = h * keep[:, None]
    return env, DistillSequence(obs=np.stack(seq_obs), h0=h0, resets=np.stack(resets),
                                teacher_actions=np.stack(teacher_actions), privileged=np.stack(privileged),
                                episodes=episodes)


def student_checkpoint(student: StudentNet, optimizer: Adam, config: RunConfig, iteration: int,
                       teacher_path: str) -> Checkpoint:
    tensors = {f"net.{k}": v for k, v in student.named_parameters()}
    tensors.update(optimizer.state())
    meta = {"seed": str(config.seed), "iteration": str(iteration), "teacher": os.path.basename(teacher_path),
            **student.describe()}
    return Checkpoint(layout_hash=student.layout_hash, role=PolicyRole.STUDENT, tensors=tensors, meta=meta)


def load_student(path: str, expected_layout: Optional[str] = None) -> StudentNet:
    """Only student checkpoints are accepted as student weights; a teacher file is refused here."""
    checkpoint = load_checkpoint(path, expected_role=PolicyRole.STUDENT, expected_layout=expected_layout)
    meta = checkpoint.meta
    try:
        net_config = TrainConfig(imu_hidden=_parse_hidden(meta["imu_hidden"]),
                                 trunk_hidden=_parse_hidden(meta["trunk_hidden"]),
                                 belief_hidden=int(meta["belief_hidden"]))
        student = StudentNet(_parse_sizes(meta["sizes"]), int(meta["privileged_dim"]), net_config, None,
                             int(meta["num_actions"]), checkpoint.layout_hash)
        student.load_parameters(checkpoint.group("net"))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not describe a student network: {e}") from None
    return student


def distill_student(config: RunConfig, teacher_path: str, run_dir: Optional[str] = None, progress: bool = False,
                    end_effector: Optional[str] = None) -> tuple[StudentNet, pd.DataFrame]:
    """
    Student training on noisy observations. Rollouts are driven by the student ("dagger") or by the
    teacher ("bc"); every iteration is one truncated sequence of student_steps_per_batch steps.
    """
    train = config.train
    seed = config.seed
    layout = layout_hash(train.use_height_scan)
    teacher = load_teacher(teacher_path, train, expected_layout=layout)
    student = StudentNet(student_input_sizes(), layout_size(PRIVILEGED_LAYOUT), train,
                         np.random.default_rng(derive_seed(seed, 4)), layout=layout)
    optimizer = Adam(student.parameters(), train.distill_learning_rate)
    envs = make_envs(config, train.num_envs, derive_seed(seed, 5), end_effector=end_effector, noise=True)
    metrics_path = ckpt_dir = None
    if run_dir:
        metrics_path = os.path.join(run_dir, "metrics.csv")
        ckpt_dir = os.path.join(run_dir, "ckpt")
        os.makedirs(ckpt_dir, exist_ok=True)

    rows = []
    bar = tqdm(range(train.student_epochs), desc="student", disable=not progress)
    for it in bar:
        results = starmap(_collect_student_chunk, [(env, teacher, student, train.student_steps_per_batch,
                                                    train.distill_mode) for env in envs], config.run.workers)
        envs[:] = [env for env, _ in results]
        parts = [seq for _, seq in results]
        seq = DistillSequence(obs=np.concatenate([p.obs for p in parts], axis=1),
                              h0=np.concatenate([p.h0 for p in parts]),
                              resets=np.concatenate([p.resets for p in parts], axis=1),
                              teacher_actions=np.concatenate([p.teacher_actions for p in parts], axis=1),
                              privileged=np.concatenate([p.privileged for p in parts], axis=1))
        lr = learning_rate(train, it, train.student_epochs, train.distill_learning_rate)
        stats = distill_step(student, optimizer, seq, train.reconstruction_weight, train.max_grad_norm, lr)
        summary = episode_summary([e for p in parts for e in p.episodes])
        row = {"iter": it, "return": summary["return"], "goal_rate": summary["goal_rate"],
               "term_rate": summary["term_rate"], "timeout_rate": summary["timeout_rate"],
               "level_mean": float(np.mean(np.concatenate([env.levels for env in envs]))),
               "loss": stats["loss"], "imitation": stats["imitation"], "reconstruction": stats["reconstruction"],
               "pose_error": stats["pose_error"], "skipped": stats["skipped"], "lr": lr * optimizer.lr_scale}
        rows.append(row)
        _append_metrics(metrics_path, row, it == 0)
        bar.set_postfix(imitation=f"{stats['imitation']:.4f}", pose=f"{stats['pose_error']:.4f}")
        if ckpt_dir and train.checkpoint_every > 0 and (it + 1) % train.checkpoint_every == 0:
            save_checkpoint(student_checkpoint(student, optimizer, config, it + 1, teacher_path),
                            os.path.join(ckpt_dir, f"student_{it + 1:05d}.ckpt"))
    if ckpt_dir:
        save_checkpoint(student_checkpoint(student, optimizer, config, train.student_epochs, teacher_path),
                        os.path.join(ckpt_dir, "student.ckpt"))
    return student, pd.DataFrame(rows)
