"""Clipped-surrogate PPO over a batch of locomotion environments.

The actor is a diagonal Gaussian around an MLP mean with a state-independent
learned log-std; the critic is a separate MLP.  BLAS is pinned to one thread
during training so results do not depend on the machine's thread count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from erfi.env import EpisodeConfig, LocomotionEnv, observation_scale
from erfi.model import RobotModel
from erfi.nn import (
    Adam,
    PolicyParams,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_log_prob,
    init_params,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    horizon: int = 24
    epochs: int = 5
    minibatches: int = 4
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    entropy_coef: float = 0.001
    value_coef: float = 1.0
    max_grad_norm: float = 1.0
    iterations: int = 1500
    hidden: tuple[int, ...] = (128, 64)
    init_std: float = 0.8

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip ratio must be positive")
        if self.horizon < 1 or self.epochs < 1 or self.minibatches < 1 or self.iterations < 0:
            raise ValueError("horizon, epochs and minibatches must be >= 1, iterations >= 0")


@dataclass
class RolloutBuffer:
    """Arrays shaped ``(horizon, num_envs, ...)``."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def empty(cls, horizon: int, num_envs: int, obs_size: int, act_size: int) -> RolloutBuffer:
        z = lambda *s: np.zeros((horizon, num_envs) + s)
        return cls(z(obs_size), z(act_size), z(), z(), z(), z(), np.zeros(num_envs))


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates and returns for ``(T, N)`` arrays.

    ``dones[t]`` marks that the episode ended after step ``t``, so no value is
    bootstrapped across it.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    next_value = np.asarray(last_values, dtype=float)
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    std = x.std()
    return x / std if std > 0 else x


class ActorCritic:
    """Policy and value networks plus the fixed observation scaling."""

    def __init__(self, policy: PolicyParams, value: PolicyParams, obs_scale: np.ndarray | None = None):
        self.policy = policy
        self.value = value
        self.obs_scale = np.ones(policy.sizes[0]) if obs_scale is None else np.asarray(obs_scale)

    @classmethod
    def create(cls, rng: np.random.Generator, obs_size: int, act_size: int, config: PpoConfig,
               obs_scale=None) -> ActorCritic:
        policy = init_params(rng, (obs_size, *config.hidden, act_size), init_std=config.init_std)
        value = init_params(rng, (obs_size, *config.hidden, 1), with_log_std=False, output_gain=1.0)
        return cls(policy, value, obs_scale)

    def act_mean(self, obs) -> np.ndarray:
        return mlp_forward(self.policy, np.asarray(obs) * self.obs_scale)[0]

    def values(self, obs) -> np.ndarray:
        return mlp_forward(self.value, np.asarray(obs) * self.obs_scale)[0][..., 0]


@dataclass
class UpdateStats:
    surrogate: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def ppo_update(ac: ActorCritic, buffer: RolloutBuffer, config: PpoConfig,
               optimizer: Adam, rng: np.random.Generator) -> UpdateStats:
    """Several epochs of minibatch ascent on the clipped surrogate.

    Policy and value gradients share one optimizer over the concatenated
    parameters; the joint gradient norm is capped at ``max_grad_norm``.
    """
    if buffer.advantages is None:
        raise ValueError("compute advantages before updating")
    obs = buffer.obs.reshape(-1, buffer.obs.shape[-1]) * ac.obs_scale
    actions = buffer.actions.reshape(-1, buffer.actions.shape[-1])
    old_logp = buffer.log_probs.reshape(-1)
    adv = normalize(buffer.advantages.reshape(-1))
    returns = buffer.returns.reshape(-1)
    n = len(adv)
    n_pol = len(ac.policy.data)
    flat = np.concatenate([ac.policy.data, ac.value.data])
    stats = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for mb in np.array_split(order, config.minibatches):
            grad, s = _loss_grad(ac, obs[mb], actions[mb], old_logp[mb], adv[mb], returns[mb], config)
            if not np.isfinite(grad).all() or not all(math.isfinite(v) for v in s):
                raise TrainingError("non-finite loss or gradient; update aborted")
            clip_grad_norm(grad, config.max_grad_norm)
            optimizer.step(flat, grad)
            ac.policy.data[...] = flat[:n_pol]
            ac.value.data[...] = flat[n_pol:]
            ac.policy.touch()
            ac.value.touch()
            stats.append(s)
    return UpdateStats(*np.mean(np.array(stats), axis=0)) if stats else UpdateStats(0, 0, 0, 0, 0)


def _loss_grad(ac, obs, actions, old_logp, adv, returns, config):
    m = len(adv)
    mean, pcache = mlp_forward(ac.policy, obs)
    log_std = ac.policy.log_std
    logp = gaussian_log_prob(mean, log_std, actions)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1 - config.clip, 1 + config.clip)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    surrogate = np.minimum(unclipped_obj, clipped_obj)
    # d(min)/d(ratio) is adv where the unclipped branch is active
    active = unclipped_obj <= clipped_obj
    d_logp = -(active * adv * ratio) / m
    inv_var = np.exp(-2 * log_std)
    d_mean = d_logp[:, None] * (actions - mean) * inv_var
    g_pol = mlp_backward(ac.policy, pcache, d_mean)
    _, _, g_log_std = ac.policy.unflatten(g_pol)
    z2 = (actions - mean) ** 2 * inv_var
    g_log_std[...] = (d_logp[:, None] * (z2 - 1.0)).sum(axis=0) - config.entropy_coef

    v, vcache = mlp_forward(ac.value, obs)
    err = v[:, 0] - returns
    g_val = mlp_backward(ac.value, vcache, (config.value_coef * 2.0 * err / m)[:, None])

    entropy = gaussian_entropy(log_std)
    kl = float(np.mean(old_logp - logp))
    frac = float(np.mean(np.abs(ratio - 1) > config.clip))
    stats = (float(surrogate.mean()), float(np.mean(err**2)), entropy, kl, frac)
    return np.concatenate([g_pol, g_val]), stats


@dataclass
class CurveRecord:
    iteration: int
    mean_reward: float
    mean_episode_len: float
    mean_speed: float


@dataclass
class TrainResult:
    policy: PolicyParams
    value: PolicyParams
    curve: list[CurveRecord] = field(default_factory=list)
    obs_scale: np.ndarray | None = None


def train(model: RobotModel, env_config: EpisodeConfig, ppo: PpoConfig, seed: int,
          num_envs: int = 64, callback=None) -> TrainResult:
    """Train a policy; bit-reproducible for a fixed seed and environment count.

    The injection strategy comes from ``env_config.injection``.  Episodes that
    hit the time limit are bootstrapped with the critic's value of their final
    observation.  ``mean_speed`` is the forward speed along the commanded
    direction, averaged over the iteration.
    """
    root = np.random.SeedSequence(seed)
    env_ss, init_ss, run_ss = root.spawn(3)
    env_config = _with_seed(env_config, seed)
    env = LocomotionEnv(model, env_config, num_envs, env_seeds=env_ss.spawn(num_envs))
    obs_size, act_size = env_config.obs_size, model.num_joints
    ac = ActorCritic.create(np.random.default_rng(init_ss), obs_size, act_size, ppo,
                            observation_scale(env_config.perceptive))
    result = TrainResult(ac.policy, ac.value, [], ac.obs_scale)
    if ppo.iterations == 0:
        return result
    rng = np.random.default_rng(run_ss)
    opt = Adam(len(ac.policy.data) + len(ac.value.data), lr=ppo.lr)
    buf = RolloutBuffer.empty(ppo.horizon, num_envs, obs_size, act_size)

    with threadpool_limits(limits=1):
        obs = env.reset()
        for it in range(ppo.iterations):
            finished_len = []
            speed = np.zeros(num_envs)
            diverged = 0
            for t in range(ppo.horizon):
                x = obs * ac.obs_scale
                mean = mlp_forward(ac.policy, x)[0]
                value = mlp_forward(ac.value, x)[0][:, 0]
                actions = mean + np.exp(ac.policy.log_std) * rng.standard_normal(mean.shape)
                buf.obs[t] = obs
                buf.actions[t] = actions
                buf.log_probs[t] = gaussian_log_prob(mean, ac.policy.log_std, actions)
                buf.values[t] = value
                cmd = env.command.copy()
                obs, reward, info = env.step(actions)
                speed += info.forward_speed * np.sign(cmd)
                timeout = info.timeout
                if timeout.any():
                    reward = reward + ppo.gamma * np.where(timeout, ac.values(info.final_obs), 0.0)
                buf.rewards[t] = reward
                buf.dones[t] = info.done
                finished_len.extend(info.episode_length[info.done].tolist())
                diverged += int(info.diverged.sum())
            if diverged > 0.5 * num_envs:
                raise TrainingError(f"iteration {it}: {diverged} of {num_envs} environments diverged")
            buf.last_values = ac.values(obs)
            buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones,
                                                      buf.last_values, ppo.gamma, ppo.lam)
            stats = ppo_update(ac, buf, ppo, opt, rng)
            rec = CurveRecord(it, float(buf.rewards.mean()),
                              float(np.mean(finished_len)) if finished_len else float(env.ep_length.mean()),
                              float(speed.mean() / ppo.horizon))
            result.curve.append(rec)
            if callback is not None:
                callback(rec, stats)
            if it % 50 == 0:
                log.info("iter %d reward %.3f len %.1f speed %.3f kl %.4f", it, rec.mean_reward,
                         rec.mean_episode_len, rec.mean_speed, stats.approx_kl)
    return result


def _with_seed(cfg: EpisodeConfig, seed: int) -> EpisodeConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def evaluate_speed(model: RobotModel, policy: PolicyParams, env_config: EpisodeConfig,
                   command: float = 0.5, duration: float = 8.0, num_envs: int = 8,
                   seed: int = 0) -> float:
    """Mean forward speed of the deterministic policy at a fixed command.

    Speed is distance over the full duration, so a fall counts only the
    distance covered before it.
    """
    from dataclasses import replace

    cfg = replace(env_config, command_range=(command, command), max_duration=duration,
                  init_noise=max(env_config.init_noise, 0.02), seed=seed)
    env = LocomotionEnv(model, cfg, num_envs, autoreset=False)
    obs = env.reset()
    scale = observation_scale(cfg.perceptive)
    with threadpool_limits(limits=1):
        while env.active.any():
            obs, _, info = env.step(mlp_forward(policy, obs * scale)[0])
    dist = env.q[:, 0] - env.start_x
    return float(np.mean(dist / duration))
