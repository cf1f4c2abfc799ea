"""Velocity-tracking locomotion task on the planar quadruped.

:class:`LocomotionEnv` steps a batch of independent environments.  Each
environment owns its random stream (terrain, randomization, command and
injection draws all come from it), so an environment's trajectory depends
only on its own seed and actions, never on its position in the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from erfi.actuation import (
    ImpedanceGains,
    InjectionConfig,
    InjectionMode,
    assign_injection_modes,
    check_base_injection,
    uses_episode_offset,
    uses_step_injection,
)
from erfi.dynamics import GRAVITY, ExternalWrench, GeneralizedState, ModelBatch, advance
from erfi.model import NUM_BASE_DOFS, RobotModel, scale_torso_mass
from erfi.terrain import TerrainBatch, TerrainKind, TerrainProfile, generate_terrain

HISTORY = 3
SCAN_POINTS = 11
SCAN_SPACING = 0.1
BLIND_OBS = 2 + 3 + 2 * HISTORY * 4 + 4 + 1
PERCEPTIVE_OBS = BLIND_OBS + SCAN_POINTS
MAX_PITCH = 1.0
MIN_HEIGHT_FRACTION = 0.3


class Outcome(IntEnum):
    RUNNING = 0
    FALL = 1
    TIMEOUT = 2


@dataclass(frozen=True)
class Command:
    """Forward velocity command; the lateral and yaw slots stay zero in the plane."""

    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        if not abs(self.vx) <= 1.0:
            raise ValueError(f"|vx| must not exceed 1 m/s, got {self.vx}")
        if self.vy != 0.0 or self.yaw_rate != 0.0:
            raise ValueError("the planar model only accepts forward commands")


def sample_command(rng: np.random.Generator, vx_range=(-1.0, 1.0)) -> Command:
    lo, hi = vx_range
    if lo == hi:
        return Command(float(lo))
    return Command(float(rng.uniform(lo, hi)))


@dataclass(frozen=True)
class DomainRandomization:
    """Uniform per-episode ranges for the dynamics-randomization baseline.

    ``friction`` of ``None`` keeps the terrain friction.
    """

    mass_scale: tuple[float, float] = (1.0, 1.0)
    friction: tuple[float, float] | None = None
    gain_scale: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for name in ("mass_scale", "friction", "gain_scale"):
            r = getattr(self, name)
            if r is None:
                continue
            if len(r) != 2 or not 0 < r[0] <= r[1]:
                raise ValueError(f"{name} range must satisfy 0 < low <= high, got {r}")

    @property
    def enabled(self) -> bool:
        return (self.mass_scale != (1.0, 1.0) or self.friction is not None
                or self.gain_scale != (1.0, 1.0))


def apply_domain_randomization(rng: np.random.Generator, model: RobotModel,
                               gains: ImpedanceGains, dr: DomainRandomization,
                               friction: float) -> tuple[RobotModel, ImpedanceGains, np.ndarray]:
    """Randomized copies of the model and gains plus per-foot friction.

    Draw order is fixed (mass, friction per foot, Kp, Kd) so results depend
    only on the stream state.  Inputs are never modified.
    """
    m = rng.uniform(*dr.mass_scale)
    mu = rng.uniform(*dr.friction, model.num_feet) if dr.friction else np.full(model.num_feet, friction)
    kp = rng.uniform(*dr.gain_scale)
    kd = rng.uniform(*dr.gain_scale)
    return scale_torso_mass(model, m), gains.scaled(kp, kd), mu


@dataclass(frozen=True)
class RewardWeights:
    velocity: float = 1.0
    angular: float = 0.5
    torque: float = 2e-4
    action_rate: float = 0.01
    orientation: float = 0.5
    joint_acc: float = 2.5e-7

    def as_array(self) -> np.ndarray:
        return np.array([self.velocity, self.angular, self.torque, self.action_rate,
                         self.orientation, self.joint_acc])


REWARD_NAMES = ("velocity", "angular", "torque", "action_rate", "orientation", "joint_acc")


@dataclass(frozen=True)
class RewardTerms:
    """Unweighted terms, shape ``(..., 6)`` in ``REWARD_NAMES`` order, and their weighted sum."""

    terms: np.ndarray
    total: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.terms[..., REWARD_NAMES.index(name)]


def compute_reward(q, u, u_prev, tau, action, prev_action, command, weights: RewardWeights,
                   dt: float) -> RewardTerms:
    """Velocity-tracking reward with small regularizers.

    ``tau`` is the per-joint RMS torque over the policy period and ``dt``
    the policy period used for the joint-acceleration estimate.
    """
    q, u, u_prev = (np.asarray(a, dtype=float) for a in (q, u, u_prev))
    tau, action, prev_action = (np.asarray(a, dtype=float) for a in (tau, action, prev_action))
    vx = u[..., 0]
    omega = u[..., 2]
    joint_acc = (u[..., NUM_BASE_DOFS:] - u_prev[..., NUM_BASE_DOFS:]) / dt
    terms = np.stack([
        np.exp(-((vx - command) ** 2) / 0.25),
        np.exp(-(omega**2) / 0.25),
        -np.sum(tau**2, axis=-1),
        -np.sum((action - prev_action) ** 2, axis=-1),
        -np.sin(q[..., 2]) ** 2,
        -np.sum(joint_acc**2, axis=-1),
    ], axis=-1)
    return RewardTerms(terms, terms @ weights.as_array())


@dataclass(frozen=True)
class EpisodeConfig:
    max_duration: float = 8.0
    policy_rate: float = 50.0
    decimation: int = 8
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    dr: DomainRandomization = field(default_factory=DomainRandomization)
    terrain: TerrainKind = TerrainKind.FLAT
    friction: float = 0.5
    rough_amplitude: float = 0.02
    command_range: tuple[float, float] = (-1.0, 1.0)
    perceptive: bool = False
    action_scale: float = 0.5
    gains: ImpedanceGains = field(default_factory=ImpedanceGains)
    weights: RewardWeights = field(default_factory=RewardWeights)
    gravity: float = GRAVITY
    # std of the joint-angle (rad) and base-velocity (m/s) jitter at reset
    init_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "terrain", TerrainKind(self.terrain))
        if self.decimation < 1:
            raise ValueError("decimation must be at least 1")
        if not (self.max_duration > 0 and self.policy_rate > 0):
            raise ValueError("durations and rates must be positive")
        if self.init_noise < 0:
            raise ValueError("init_noise must be non-negative")

    @property
    def policy_dt(self) -> float:
        return 1.0 / self.policy_rate

    @property
    def dt(self) -> float:
        return 1.0 / (self.policy_rate * self.decimation)

    @property
    def obs_size(self) -> int:
        return PERCEPTIVE_OBS if self.perceptive else BLIND_OBS


def observation_scale(perceptive: bool = False) -> np.ndarray:
    """Fixed per-field input scaling applied before the policy network."""
    parts = [np.ones(2), np.array([2.0, 2.0, 0.25]), np.full(HISTORY * 4, 2.0),
             np.full(HISTORY * 4, 0.05), np.ones(4), np.array([2.0])]
    if perceptive:
        parts.append(np.full(SCAN_POINTS, 2.0))
    return np.concatenate(parts)


def gravity_in_base(pitch) -> np.ndarray:
    pitch = np.asarray(pitch, dtype=float)
    return np.stack([np.sin(pitch), -np.cos(pitch)], axis=-1)


def build_observation(q, u, prev_action, command, err_hist, vel_hist, terrain=None,
                      perceptive: bool = False) -> np.ndarray:
    """Assemble the observation; histories are ``(..., 3, 4)`` ordered oldest first."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    pitch = q[..., 2]
    c, s = np.cos(pitch), np.sin(pitch)
    v_base = np.stack([c * u[..., 0] - s * u[..., 1], s * u[..., 0] + c * u[..., 1], u[..., 2]], -1)
    lead = q.shape[:-1]
    parts = [gravity_in_base(pitch), v_base,
             np.reshape(err_hist, lead + (-1,)), np.reshape(vel_hist, lead + (-1,)),
             np.asarray(prev_action, dtype=float), np.asarray(command, dtype=float)[..., None]]
    if perceptive:
        xs = q[..., :1] + SCAN_SPACING * np.arange(SCAN_POINTS)
        heights = terrain.height(np.atleast_2d(xs)).reshape(xs.shape)
        parts.append(heights - q[..., 1:2])
    return np.concatenate(parts, axis=-1)


def torso_corners(model: RobotModel, q) -> np.ndarray:
    """World positions ``(..., 4, 2)`` of the torso box corners."""
    q = np.asarray(q, dtype=float)
    half_l = model.torso_length / 2
    half_h = model.torso_height / 2
    local = np.array([[half_l, half_h], [half_l, -half_h], [-half_l, half_h], [-half_l, -half_h]])
    c, s = np.cos(q[..., 2]), np.sin(q[..., 2])
    x = q[..., None, 0] + c[..., None] * local[:, 0] + s[..., None] * local[:, 1]
    z = q[..., None, 1] - s[..., None] * local[:, 0] + c[..., None] * local[:, 1]
    return np.stack([x, z], axis=-1)


def knee_points(model: RobotModel, q) -> np.ndarray:
    """World positions ``(..., K, 2)`` of the distal joints (knees)."""
    from erfi.dynamics import forward_kinematics

    kin = forward_kinematics(model, q)
    links = [j + 1 for j in model.knee_joints()]
    return kin.origins[..., links, :]


def check_termination(q, model: RobotModel, t, max_duration: float, terrain=None) -> np.ndarray:
    """FALL on excessive pitch, a collapsed torso, or torso/knee ground contact.

    Torso height is measured above the terrain directly under the base.
    Returns an integer :class:`Outcome` array (a scalar for a single state).
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    terrain = terrain or TerrainProfile()
    t = np.broadcast_to(np.asarray(t, dtype=float), qb.shape[:1])
    ground = terrain.height(qb[:, :1]).reshape(-1)
    fall = np.abs(qb[:, 2]) > MAX_PITCH
    fall |= (qb[:, 1] - ground) < MIN_HEIGHT_FRACTION * model.nominal_standing_height()
    for pts in (torso_corners(model, qb), knee_points(model, qb)):
        h = terrain.height(pts[..., 0]).reshape(pts.shape[:-1])
        fall |= (pts[..., 1] < h).any(axis=-1)
    out = np.where(fall, Outcome.FALL, np.where(t >= max_duration - 1e-9, Outcome.TIMEOUT,
                                                Outcome.RUNNING)).astype(np.int64)
    return out[0] if single else out


@dataclass
class StepInfo:
    """Per-environment diagnostics of one policy step.

    Episode statistics refer to the episode that just ended where ``done``.
    """

    outcome: np.ndarray
    reward_terms: np.ndarray
    forward_speed: np.ndarray
    diverged: np.ndarray
    episode_return: np.ndarray
    episode_length: np.ndarray
    episode_distance: np.ndarray
    episode_time: np.ndarray
    final_obs: np.ndarray
    torque_rms: np.ndarray  # per-joint RMS torque over the policy period

    @property
    def done(self) -> np.ndarray:
        return self.outcome != Outcome.RUNNING

    @property
    def timeout(self) -> np.ndarray:
        return self.outcome == Outcome.TIMEOUT


class LocomotionEnv:
    """A batch of locomotion environments stepped at the policy rate.

    ``env_seeds`` (ints or ``SeedSequence``) fixes each environment's stream;
    by default they are spawned from ``config.seed``.  ``modes`` overrides
    the per-environment injection modes derived from the strategy.  With
    ``autoreset`` finished environments restart immediately and the returned
    observation belongs to the new episode; otherwise they are frozen.
    """

    def __init__(self, model: RobotModel, config: EpisodeConfig, num_envs: int,
                 env_seeds=None, modes=None, autoreset: bool = True):
        if num_envs < 1:
            raise ValueError("num_envs must be at least 1")
        self.model = model
        self.config = config
        self.num_envs = B = num_envs
        if env_seeds is None:
            env_seeds = np.random.SeedSequence(config.seed).spawn(B)
        if len(env_seeds) != B:
            raise ValueError("need one seed per environment")
        self.rngs = [np.random.default_rng(s) for s in env_seeds]
        self.modes = list(modes) if modes is not None else assign_injection_modes(B, config.injection.mode)
        self.step_lim = np.array([config.injection.tau_lim_r if uses_step_injection(m) else 0.0
                                  for m in self.modes])
        self.off_lim = np.array([config.injection.tau_lim_o if uses_episode_offset(m) else 0.0
                                 for m in self.modes])
        self.base_inj = config.injection.base_injection
        if self.base_inj:
            check_base_injection(config.injection, model.total_mass)
        self.autoreset = autoreset
        J = model.num_joints
        self.nominal = np.asarray(model.nominal_joint_positions, dtype=float)
        self.torque_limits = np.asarray(model.torque_limits, dtype=float)
        self.standing_height = model.nominal_standing_height()
        self.models = ModelBatch([model] * B) if config.dr.enabled else model
        self.terrain = TerrainBatch.stack([self._default_terrain()] * B)

        self.q = np.zeros((B, model.num_dofs))
        self.u = np.zeros((B, model.num_dofs))
        self.t = np.zeros(B)
        self.kp = np.zeros((B, J))
        self.kd = np.zeros((B, J))
        self.mu = np.zeros((B, model.num_feet))
        self.tau_o = np.zeros((B, J))
        self.base_off = np.zeros((B, 3))
        self.command = np.zeros(B)
        self.prev_action = np.zeros((B, J))
        self.q_des = np.zeros((B, J))
        self.err_hist = np.zeros((B, HISTORY, J))
        self.vel_hist = np.zeros((B, HISTORY, J))
        self.active = np.ones(B, dtype=bool)
        self.ep_return = np.zeros(B)
        self.ep_length = np.zeros(B, dtype=np.int64)
        self.start_x = np.zeros(B)
        self.outcome = np.zeros(B, dtype=np.int64)
        # evaluation-time perturbations, set by the harness
        self.sensor_offset = np.zeros((B, J))
        self.wrench = ExternalWrench(np.zeros((B, 2)), np.zeros(B), np.zeros(B), np.zeros(B))

    def _default_terrain(self) -> TerrainProfile:
        return TerrainProfile(kind=self.config.terrain, friction=self.config.friction,
                              samples=np.zeros(851) if self.config.terrain is TerrainKind.ROUGH else None)

    # -- reset ---------------------------------------------------------------
    def reset(self, indices=None) -> np.ndarray:
        idx = np.arange(self.num_envs) if indices is None else np.atleast_1d(indices)
        for i in idx:
            self._reset_one(int(i))
        return self.observe()

    def set_terrain(self, index: int, profile: TerrainProfile) -> None:
        """Place a specific terrain under one environment (takes effect immediately)."""
        self.terrain.assign(index, profile)
        self.mu[index] = profile.friction

    def _reset_one(self, i: int) -> None:
        cfg = self.config
        rng = self.rngs[i]
        if cfg.terrain is not TerrainKind.FLAT:
            profile = generate_terrain(rng, cfg.terrain, amplitude=cfg.rough_amplitude,
                                       friction=cfg.friction)
            self.terrain.assign(i, profile)
        friction = float(self.terrain.friction[i])
        if cfg.dr.enabled:
            model, gains, mu = apply_domain_randomization(rng, self.model, cfg.gains, cfg.dr, friction)
            self.models.set(i, model)
        else:
            gains, mu = cfg.gains, np.full(self.model.num_feet, friction)
        self.kp[i] = np.broadcast_to(gains.kp, self.kp[i].shape)
        self.kd[i] = np.broadcast_to(gains.kd, self.kd[i].shape)
        self.mu[i] = mu
        self.command[i] = sample_command(rng, cfg.command_range).vx
        inj = cfg.injection
        if self.off_lim[i] > 0 or self.base_inj:
            lim = self.off_lim[i]
            self.tau_o[i] = rng.uniform(-lim, lim, self.model.num_joints) if lim > 0 else 0.0
            if self.base_inj and uses_episode_offset(self.modes[i]):
                self.base_off[i, :2] = rng.uniform(-inj.f_lim_rb, inj.f_lim_rb, 2)
                self.base_off[i, 2] = rng.uniform(-inj.tau_lim_rb, inj.tau_lim_rb)
        q = np.zeros(self.model.num_dofs)
        u = np.zeros(self.model.num_dofs)
        q[NUM_BASE_DOFS:] = self.nominal
        if cfg.init_noise > 0:
            q[NUM_BASE_DOFS:] += rng.normal(0.0, cfg.init_noise, self.model.num_joints)
            u[:2] = rng.normal(0.0, cfg.init_noise, 2)
        q[1] = self.standing_height + float(self.terrain.take(i).height(np.zeros((1, 1)))[0, 0])
        self.q[i] = q
        self.u[i] = u
        self.t[i] = 0.0
        self.prev_action[i] = 0.0
        self.q_des[i] = self.nominal
        self.err_hist[i] = 0.0
        self.vel_hist[i] = 0.0
        self.ep_return[i] = 0.0
        self.ep_length[i] = 0
        self.start_x[i] = q[0]
        self.active[i] = True
        self.outcome[i] = Outcome.RUNNING

    # -- stepping ------------------------------------------------------------
    def observe(self) -> np.ndarray:
        return build_observation(self.q, self.u, self.prev_action, self.command, self.err_hist,
                                 self.vel_hist, self.terrain, self.config.perceptive)

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, StepInfo]:
        cfg = self.config
        B, J = self.num_envs, self.model.num_joints
        actions = np.array(actions, dtype=float).reshape(B, J)
        run = self.active.copy()
        bad_action = run & ~np.isfinite(actions).all(axis=1)
        actions[bad_action] = 0.0
        sub = np.flatnonzero(run & ~bad_action)

        q_des = self.nominal + cfg.action_scale * actions
        u_prev = self.u.copy()
        tau_sq = np.zeros((B, J))
        diverged = np.zeros(B, dtype=bool)
        if len(sub):
            tau_sq[sub], diverged[sub] = self._simulate(sub, q_des[sub])

        rms_tau = np.sqrt(tau_sq / cfg.decimation)
        reward = compute_reward(self.q, self.u, u_prev, rms_tau, actions, self.prev_action,
                                self.command, cfg.weights, cfg.policy_dt)
        total = np.where(run, reward.total, 0.0)
        outcome = check_termination(self.q, self.model, self.t, cfg.max_duration, self.terrain)
        outcome = np.where(diverged | bad_action, Outcome.FALL, outcome)
        outcome = np.where(run, outcome, self.outcome)
        total = np.where(diverged, 0.0, total)

        # histories advance only for running environments
        meas = self.q[:, NUM_BASE_DOFS:] + self.sensor_offset
        err = q_des - meas
        self.err_hist[run] = np.concatenate([self.err_hist[run, 1:], err[run, None]], axis=1)
        self.vel_hist[run] = np.concatenate([self.vel_hist[run, 1:], self.u[run, None, NUM_BASE_DOFS:]], axis=1)
        self.prev_action[run] = actions[run]
        self.q_des[run] = q_des[run]
        self.ep_return[run] += total[run]
        self.ep_length[run] += 1

        done = run & (outcome != Outcome.RUNNING)
        self.outcome = outcome
        dist = self.q[:, 0] - self.start_x
        info = StepInfo(
            outcome=outcome.copy(),
            reward_terms=reward.terms,
            forward_speed=self.u[:, 0].copy(),
            diverged=diverged | bad_action,
            episode_return=self.ep_return.copy(),
            episode_length=self.ep_length.copy(),
            episode_distance=dist,
            episode_time=self.t.copy(),
            final_obs=self.observe(),
            torque_rms=rms_tau,
        )
        if self.autoreset:
            for i in np.flatnonzero(done):
                self._reset_one(int(i))
        else:
            self.active &= ~done
        return self.observe(), total, info

    def _simulate(self, sub: np.ndarray, q_des: np.ndarray):
        cfg = self.config
        dec = cfg.decimation
        J = self.model.num_joints
        n = len(sub)
        tau_r = np.zeros((n, dec, J))
        base_r = np.zeros((n, dec, 3))
        for k, i in enumerate(sub):
            lim = self.step_lim[i]
            if lim > 0:
                tau_r[k] = self.rngs[i].uniform(-lim, lim, (dec, J))
            if self.base_inj and uses_step_injection(self.modes[i]):
                inj = cfg.injection
                base_r[k, :, :2] = self.rngs[i].uniform(-inj.f_lim_rb, inj.f_lim_rb, (dec, 2))
                base_r[k, :, 2] = self.rngs[i].uniform(-inj.tau_lim_rb, inj.tau_lim_rb, dec)
        models = self.models
        if isinstance(models, ModelBatch):
            models = ModelBatch([models.models[i] for i in sub]) if n < self.num_envs else models
        terrain = self.terrain if n == self.num_envs else self.terrain.take(sub)
        mu = self.mu[sub]
        kp, kd = self.kp[sub], self.kd[sub]
        tau_o = self.tau_o[sub]
        offset = self.sensor_offset[sub]
        w = self.wrench
        w_force, w_torque = np.asarray(w.force)[sub], np.asarray(w.torque)[sub]
        w_start, w_dur = np.asarray(w.start)[sub], np.asarray(w.duration)[sub]
        state = GeneralizedState(self.q[sub], self.u[sub])
        t = self.t[sub]
        tau_sq = np.zeros((n, J))
        diverged = np.zeros(n, dtype=bool)
        with np.errstate(all="ignore"):
            for k in range(dec):
                meas = state.q[:, NUM_BASE_DOFS:] + offset
                tau = kp * (q_des - meas) - kd * state.u[:, NUM_BASE_DOFS:] + tau_r[:, k] + tau_o
                tau = np.clip(tau, -self.torque_limits, self.torque_limits)
                tau_sq += tau**2
                on = ((t >= w_start) & (t < w_start + w_dur)).astype(float)
                force = w_force * on[:, None] + self.base_off[sub, :2] + base_r[:, k, :2]
                torque = w_torque * on + self.base_off[sub, 2] + base_r[:, k, 2]
                wrench = ExternalWrench(force, torque, 0.0, math.inf)
                state, _ = advance(models, state, tau, wrench, terrain, cfg.dt,
                                   gravity=cfg.gravity, friction=mu, check_finite=False)
                t = t + cfg.dt
                bad = ~(np.isfinite(state.q).all(1) & np.isfinite(state.u).all(1))
                if bad.any():
                    # freeze diverged environments at their last finite policy-step state
                    diverged |= bad
                    state = GeneralizedState(np.where(bad[:, None], self.q[sub], state.q),
                                             np.where(bad[:, None], 0.0, state.u))
        self.q[sub] = np.where(diverged[:, None], self.q[sub], state.q)
        self.u[sub] = np.where(diverged[:, None], 0.0, state.u)
        self.t[sub] = t
        return tau_sq, diverged

    def state(self, index: int) -> GeneralizedState:
        return GeneralizedState(self.q[index].copy(), self.u[index].copy(), float(self.t[index]))
