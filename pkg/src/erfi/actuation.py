"""Joint impedance control with random force injection.

The torque law is ``tau = Kp (q* - q) - Kd dq + tau_r + tau_o`` followed by
the actuator saturation clamp.  ``tau_r`` is redrawn at every impedance step
(RFI), ``tau_o`` once per episode (RAO); ERFI-C uses both in every
environment and ERFI-50 splits the environments between RFI and RAO.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from erfi.dynamics import GeneralizedState, advance
from erfi.model import RobotModel
from erfi.terrain import TerrainProfile

# Base-wrench injection above these limits made a 54 kg robot pronk.
PRONKING_FORCE_N = 5.0
PRONKING_TORQUE_NM = 3.0
PRONKING_REFERENCE_MASS = 54.0


class InjectionMode(str, Enum):
    NONE = "NONE"
    RFI = "RFI"
    RAO = "RAO"
    ERFI_C = "ERFI_C"
    ERFI_50 = "ERFI_50"


def uses_step_injection(mode: InjectionMode) -> bool:
    return mode in (InjectionMode.RFI, InjectionMode.ERFI_C)


def uses_episode_offset(mode: InjectionMode) -> bool:
    return mode in (InjectionMode.RAO, InjectionMode.ERFI_C)


@dataclass(frozen=True)
class ImpedanceGains:
    kp: np.ndarray | float = 80.0
    kd: np.ndarray | float = 2.0

    def __post_init__(self):
        kp = np.asarray(self.kp, dtype=float)
        kd = np.asarray(self.kd, dtype=float)
        if np.any(~(kp > 0)):
            raise ValueError("Kp must be positive")
        if np.any(~(kd >= 0)):
            raise ValueError("Kd must be non-negative")
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)

    def scaled(self, kp_scale, kd_scale) -> ImpedanceGains:
        return ImpedanceGains(self.kp * kp_scale, self.kd * kd_scale)


@dataclass(frozen=True)
class InjectionConfig:
    """Injection strategy and its magnitude limits (N m, N)."""

    mode: InjectionMode = InjectionMode.NONE
    tau_lim_r: float = 4.0
    tau_lim_o: float = 4.0
    f_lim_rb: float = 0.0
    tau_lim_rb: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", InjectionMode(self.mode))
        for name in ("tau_lim_r", "tau_lim_o", "f_lim_rb", "tau_lim_rb"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")

    @property
    def step_limit(self) -> float:
        return self.tau_lim_r if uses_step_injection(self.mode) else 0.0

    @property
    def offset_limit(self) -> float:
        return self.tau_lim_o if uses_episode_offset(self.mode) else 0.0

    @property
    def base_injection(self) -> bool:
        return self.mode is not InjectionMode.NONE and (self.f_lim_rb > 0 or self.tau_lim_rb > 0)

    def for_mode(self, mode: InjectionMode) -> InjectionConfig:
        from dataclasses import replace

        return replace(self, mode=mode)


@dataclass(frozen=True)
class EpisodeOffset:
    """Per-episode joint torque offset and optional base wrench offset."""

    tau: np.ndarray
    base_force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    base_torque: float = 0.0


def compute_torque(gains: ImpedanceGains, q_des, q, dq, tau_r=0.0, tau_o=0.0,
                   torque_limits=None) -> np.ndarray:
    """Impedance torque plus injections, clamped to the actuator limits."""
    tau = gains.kp * (np.asarray(q_des) - np.asarray(q)) - gains.kd * np.asarray(dq)
    tau = tau + tau_r + tau_o
    if torque_limits is not None:
        lim = np.asarray(torque_limits, dtype=float)
        tau = np.clip(tau, -lim, lim)
    return tau


def sample_step_injection(rng: np.random.Generator, tau_lim_r: float, num_joints: int = 4,
                          size: int | None = None) -> np.ndarray:
    """Fresh ``U(-tau_lim_r, tau_lim_r)`` per joint; ``size`` draws several steps at once."""
    if tau_lim_r < 0:
        raise ValueError("tau_lim_r must be non-negative")
    shape = (num_joints,) if size is None else (size, num_joints)
    if tau_lim_r == 0:
        return np.zeros(shape)
    return rng.uniform(-tau_lim_r, tau_lim_r, shape)


def sample_episode_offset(rng: np.random.Generator, tau_lim_o: float, num_joints: int = 4,
                          f_lim_rb: float = 0.0, tau_lim_rb: float = 0.0) -> EpisodeOffset:
    if tau_lim_o < 0 or f_lim_rb < 0 or tau_lim_rb < 0:
        raise ValueError("offset limits must be non-negative")
    tau = rng.uniform(-tau_lim_o, tau_lim_o, num_joints) if tau_lim_o > 0 else np.zeros(num_joints)
    force = rng.uniform(-f_lim_rb, f_lim_rb, 2) if f_lim_rb > 0 else np.zeros(2)
    torque = float(rng.uniform(-tau_lim_rb, tau_lim_rb)) if tau_lim_rb > 0 else 0.0
    return EpisodeOffset(tau, force, torque)


def assign_injection_modes(num_envs: int, strategy: InjectionMode | str) -> list[InjectionMode]:
    """Per-environment modes; ERFI_50 puts RFI on even and RAO on odd indices."""
    if num_envs < 1:
        raise ValueError("num_envs must be at least 1")
    strategy = InjectionMode(strategy)
    if strategy is InjectionMode.ERFI_50:
        return [InjectionMode.RFI if i % 2 == 0 else InjectionMode.RAO for i in range(num_envs)]
    return [strategy] * num_envs


def check_base_injection(config: InjectionConfig, model_mass: float) -> bool:
    """Warn when base-wrench injection is strong enough to provoke pronking.

    The thresholds scale linearly with robot mass.  Returns True when a
    warning was issued.
    """
    if not config.base_injection:
        return False
    scale = model_mass / PRONKING_REFERENCE_MASS
    f_max, t_max = PRONKING_FORCE_N * scale, PRONKING_TORQUE_NM * scale
    if config.f_lim_rb > f_max or config.tau_lim_rb > t_max:
        warnings.warn(
            f"base injection limits ({config.f_lim_rb} N, {config.tau_lim_rb} N m) exceed "
            f"({f_max:.2f} N, {t_max:.2f} N m) for a {model_mass:.1f} kg robot; "
            "policies trained this way tend to pronk", RuntimeWarning, stacklevel=2)
        return True
    return False


# -- step-response experiment -------------------------------------------------

def single_joint_model(mass: float = 1.0, length: float = 0.3) -> RobotModel:
    """A fixed base carrying one slender link, used for the step-response study."""
    return RobotModel(
        link_names=("base", "link"),
        masses=(1.0, mass),
        inertias=(0.01, mass * length**2 / 12.0),
        lengths=(0.1, length),
        com_offsets=((0.0, 0.0), (0.0, -length / 2)),
        parents=(-1, 0),
        joint_origins=((0.0, 0.0),),
        joint_lower=(-math.pi,),
        joint_upper=(math.pi,),
        velocity_limits=(20.0,),
        torque_limits=(1e3,),
        nominal_joint_positions=(0.0,),
        foot_links=(),
        foot_offsets=(),
        nominal_mass=1.0 + mass,
        locked_dofs=(0, 1, 2),
    )


@dataclass
class StepResponse:
    """Trajectories (seeds x steps) and per-seed response metrics."""

    seeds: np.ndarray
    t: np.ndarray
    q: np.ndarray
    q_desired: float
    tau: np.ndarray
    rise_time: np.ndarray
    settling_time: np.ndarray
    steady_state_offset: np.ndarray

    def summary(self) -> dict[str, float]:
        out = {}
        for name in ("rise_time", "settling_time", "steady_state_offset"):
            v = getattr(self, name)
            v = v[np.isfinite(v)]
            out[f"{name}_mean"] = float(np.mean(v)) if len(v) else math.nan
            # shifting by one sample keeps identical values at exactly zero spread
            out[f"{name}_std"] = float(np.std(v - v[0])) if len(v) else math.nan
        return out


def response_metrics(t: np.ndarray, q: np.ndarray, q0: float, q_final: float) -> tuple[float, float]:
    """10-90 % rise time and +-5 % settling time of one trajectory towards ``q_final``."""
    span = q_final - q0
    if span == 0:
        return 0.0, 0.0
    frac = (q - q0) / span
    i10 = np.flatnonzero(frac >= 0.1)
    i90 = np.flatnonzero(frac >= 0.9)
    rise = float(t[i90[0]] - t[i10[0]]) if len(i10) and len(i90) else math.nan
    outside = np.flatnonzero(np.abs(frac - 1.0) > 0.05)
    if len(outside) == 0:
        settle = float(t[0])
    elif outside[-1] + 1 < len(t):
        settle = float(t[outside[-1] + 1])
    else:
        settle = math.nan
    return rise, settle


def run_step_response(gains: ImpedanceGains, step: float, injection: InjectionConfig,
                      duration: float, seeds, dt: float = 0.0025,
                      offset: float | None = None) -> StepResponse:
    """Step the desired angle of a gravity-free joint from 0 to ``step``.

    Injections follow ``injection``; ``offset`` pins the RAO torque instead of
    sampling it.  Metrics are measured against the steady state (mean of the
    last 10 % of the run), so an offset shifts the target rather than
    breaking the rise time.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    model = single_joint_model()
    terrain = TerrainProfile()
    seeds = np.asarray(list(seeds), dtype=np.int64)
    steps = int(round(duration / dt))
    B = len(seeds)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    if uses_episode_offset(injection.mode):
        if offset is not None:
            tau_o = np.full(B, float(offset))
        else:
            tau_o = np.array([sample_episode_offset(r, injection.tau_lim_o, 1).tau[0] for r in rngs])
    else:
        tau_o = np.zeros(B)
    tau_r = np.zeros((B, steps))
    if uses_step_injection(injection.mode):
        tau_r = np.stack([sample_step_injection(r, injection.tau_lim_r, 1, size=steps)[:, 0]
                          for r in rngs])

    state = GeneralizedState(np.zeros((B, 4)), np.zeros((B, 4)))
    t = dt * np.arange(steps + 1)
    q = np.zeros((B, steps + 1))
    tau = np.zeros((B, steps + 1))
    lim = np.asarray(model.torque_limits)
    for k in range(steps):
        torque = compute_torque(gains, step, state.q[:, 3], state.u[:, 3], tau_r[:, k], tau_o, lim)
        tau[:, k] = torque
        state, _ = advance(model, state, torque[:, None], None, terrain, dt, gravity=0.0)
        q[:, k + 1] = state.q[:, 3]
    tau[:, -1] = tau[:, -2]

    tail = max(1, steps // 10)
    final = q[:, -tail:].mean(axis=1)
    metrics = np.array([response_metrics(t, q[b], 0.0, final[b]) for b in range(B)]).reshape(B, 2)
    return StepResponse(seeds, t, q, float(step), tau, metrics[:, 0], metrics[:, 1], final - step)
