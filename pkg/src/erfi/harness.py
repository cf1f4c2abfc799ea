"""Robustness evaluation: success trials, one-parameter sweeps and comparisons.

A trial spawns the robot at the origin with a fixed 0.5 m/s command and
counts as a success when it covers 2.5 m within 8 s without falling.  The
per-trial random stream (terrain, initial jitter) depends only on the trial
seed, so every policy and every grid value sees the same set of terrains.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from threadpoolctl import threadpool_limits

from erfi.actuation import InjectionConfig, InjectionMode
from erfi.dynamics import ExternalWrench
from erfi.env import REWARD_NAMES, EpisodeConfig, LocomotionEnv, Outcome, observation_scale
from erfi.model import DOF_NAMES, NUM_BASE_DOFS, RobotModel, scale_torso_mass
from erfi.nn import PolicyParams, load_checkpoint, mlp_forward
from erfi.terrain import TerrainKind

# Reference robot used to re-express absolute perturbation ranges as ratios.
REFERENCE_MASS = 54.0
REFERENCE_BASE_MASS = 27.0


class SweepParam(str, Enum):
    BASE_MASS_SCALE = "BASE_MASS_SCALE"
    EXT_FORCE_N = "EXT_FORCE_N"
    EXT_FORCE_DURATION_S = "EXT_FORCE_DURATION_S"
    EXT_TORQUE_NM = "EXT_TORQUE_NM"
    FRICTION_MU = "FRICTION_MU"
    GRAVITY_MS2 = "GRAVITY_MS2"
    KNEE_OFFSET_RAD = "KNEE_OFFSET_RAD"
    PAYLOAD = "PAYLOAD"


class TrialOutcome(str, Enum):
    SUCCESS = "SUCCESS"
    FALL = "FALL"
    STALL = "STALL"
    TIMEOUT = "TIMEOUT"


class HarnessError(ValueError):
    pass


def mass_ratio(model: RobotModel) -> float:
    return model.nominal_mass / REFERENCE_MASS


def parameter_range(param: SweepParam, model: RobotModel) -> tuple[float, float]:
    """Admissible values of each swept parameter for ``model``."""
    r = mass_ratio(model)
    return {
        SweepParam.BASE_MASS_SCALE: (22.0 / REFERENCE_BASE_MASS, 65.0 / REFERENCE_BASE_MASS),
        SweepParam.EXT_FORCE_N: (0.0, 150.0 * r),
        SweepParam.EXT_FORCE_DURATION_S: (0.0, 3.0),
        SweepParam.EXT_TORQUE_NM: (0.0, 75.0 * r),
        SweepParam.FRICTION_MU: (0.2, 0.8),
        SweepParam.GRAVITY_MS2: (-18.0, -2.0),
        SweepParam.KNEE_OFFSET_RAD: (-0.15, 0.15),
        SweepParam.PAYLOAD: (0.0, 0.42 * model.nominal_mass),
    }[SweepParam(param)]


def default_grid(param: SweepParam, model: RobotModel, points: int = 7) -> list[float]:
    lo, hi = parameter_range(param, model)
    if SweepParam(param) is SweepParam.BASE_MASS_SCALE:
        return [lo, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, hi]
    return [float(v) for v in np.clip(np.round(np.linspace(lo, hi, points), 6), lo, hi)]


def nominal_value(param: SweepParam, config: EpisodeConfig) -> float:
    """Value of ``param`` that leaves the evaluation setting unperturbed."""
    return {
        SweepParam.BASE_MASS_SCALE: 1.0,
        SweepParam.FRICTION_MU: config.friction,
        SweepParam.GRAVITY_MS2: config.gravity,
    }.get(SweepParam(param), 0.0)


@dataclass(frozen=True)
class PayloadSpec:
    """Point mass rigidly mounted at ``offset`` (x, z) in the torso frame."""

    mass: float = 1.2
    offset: tuple[float, float] = (0.05, 0.12)

    def __post_init__(self):
        if not self.mass >= 0:
            raise HarnessError(f"payload mass must be non-negative, got {self.mass}")


def attach_payload(model: RobotModel, payload: PayloadSpec) -> RobotModel:
    """Merge a point mass into the torso by composite-body rules."""
    if payload.mass == 0:
        return model
    m0 = model.masses[0]
    c0 = np.asarray(model.com_offsets[0], dtype=float)
    p = np.asarray(payload.offset, dtype=float)
    m = m0 + payload.mass
    c = (m0 * c0 + payload.mass * p) / m
    inertia = model.inertias[0] + m0 * np.sum((c0 - c) ** 2) + payload.mass * np.sum((p - c) ** 2)
    masses = (m,) + model.masses[1:]
    return replace(model, masses=masses, inertias=(float(inertia),) + model.inertias[1:],
                   com_offsets=((float(c[0]), float(c[1])),) + model.com_offsets[1:],
                   nominal_mass=float(sum(masses)))


@dataclass
class Perturbation:
    """Everything a swept value changes for one batch of trials."""

    model: RobotModel
    config: EpisodeConfig
    wrench: ExternalWrench | None = None
    knee_offset: float = 0.0


FORCE_START_S = 2.0
FORCE_DURATION_S = 3.0
TORQUE_DURATION_S = 1.0
DURATION_SWEEP_FORCE_N = 50.0


def apply_perturbation(param: SweepParam | str, value: float, model: RobotModel,
                       config: EpisodeConfig, num_trials: int = 1) -> Perturbation:
    """Perturbed model/config/wrench for a swept ``value``; inputs are untouched."""
    try:
        param = SweepParam(param)
    except ValueError:
        raise HarnessError(f"unknown sweep parameter {param!r}") from None
    lo, hi = parameter_range(param, model)
    if not lo - 1e-9 <= value <= hi + 1e-9:
        raise HarnessError(f"{param.value}={value} outside [{lo:.4g}, {hi:.4g}]")
    out = Perturbation(model, config)
    zeros = np.zeros(num_trials)

    def wrench(fx, torque, duration):
        return ExternalWrench(np.column_stack([np.full(num_trials, fx), zeros]),
                              np.full(num_trials, torque), np.full(num_trials, FORCE_START_S),
                              np.full(num_trials, duration))

    if param is SweepParam.BASE_MASS_SCALE:
        out.model = scale_torso_mass(model, value)
    elif param is SweepParam.EXT_FORCE_N:
        out.wrench = wrench(value, 0.0, FORCE_DURATION_S)
    elif param is SweepParam.EXT_FORCE_DURATION_S:
        out.wrench = wrench(DURATION_SWEEP_FORCE_N * mass_ratio(model), 0.0, value)
    elif param is SweepParam.EXT_TORQUE_NM:
        out.wrench = wrench(0.0, value, TORQUE_DURATION_S)
    elif param is SweepParam.FRICTION_MU:
        out.config = replace(config, friction=float(value))
    elif param is SweepParam.GRAVITY_MS2:
        out.config = replace(config, gravity=float(value))
    elif param is SweepParam.KNEE_OFFSET_RAD:
        out.knee_offset = float(value)
    elif param is SweepParam.PAYLOAD:
        out.model = attach_payload(model, PayloadSpec(mass=float(value)))
    return out


@dataclass(frozen=True)
class TrialResult:
    policy_id: str
    param: str
    value: float
    seed: int
    outcome: TrialOutcome
    distance: float
    mean_speed: float
    survival: float


def classify_trial(distance: float, fell: bool, survival: float, budget: float = 8.0,
                   threshold: float = 2.5) -> TrialOutcome:
    """Success criterion: no fall and ``threshold`` metres covered within ``budget`` seconds.

    ``distance`` is the largest forward displacement reached while upright.
    A rollout that stopped early without falling is a TIMEOUT (truncated).
    """
    if fell:
        return TrialOutcome.FALL
    if survival < budget - 1e-9:
        return TrialOutcome.TIMEOUT
    return TrialOutcome.SUCCESS if distance >= threshold else TrialOutcome.STALL


@dataclass(frozen=True)
class SweepSpec:
    param: SweepParam
    grid: tuple[float, ...]
    trials: int = 50
    terrain: TerrainKind = TerrainKind.FLAT
    command: float = 0.5
    budget: float = 8.0
    threshold: float = 2.5
    payload: PayloadSpec | None = None
    # std of the per-trial initial joint (rad) and base-velocity (m/s) jitter
    init_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "param", SweepParam(self.param))
        object.__setattr__(self, "terrain", TerrainKind(self.terrain))
        grid = tuple(float(v) for v in self.grid)
        if not grid or list(grid) != sorted(grid):
            raise HarnessError("sweep grid must be nonempty and sorted")
        if self.trials < 1:
            raise HarnessError("trials must be at least 1")
        object.__setattr__(self, "grid", grid)

    @property
    def trial_seeds(self) -> list[int]:
        return [self.seed * 100_003 + k for k in range(self.trials)]


def evaluation_config(base: EpisodeConfig, spec: SweepSpec) -> EpisodeConfig:
    """Training config turned into the fixed evaluation setting."""
    return replace(base, injection=InjectionConfig(InjectionMode.NONE), dr=type(base.dr)(),
                   command_range=(spec.command, spec.command), max_duration=spec.budget,
                   terrain=spec.terrain, init_noise=spec.init_noise)


def run_trials(policy: PolicyParams, policy_id: str, model: RobotModel, base_config: EpisodeConfig,
               spec: SweepSpec, value: float, seeds=None) -> list[TrialResult]:
    """Roll out one policy at one grid value over all trial seeds (one batch)."""
    seeds = spec.trial_seeds if seeds is None else list(seeds)
    env = _trial_env(model, base_config, spec, value, seeds)
    obs = env.reset()
    scale = observation_scale(env.config.perceptive)
    best = np.zeros(len(seeds))
    fell = np.zeros(len(seeds), dtype=bool)
    diverged = np.zeros(len(seeds), dtype=bool)
    with threadpool_limits(limits=1):
        while env.active.any():
            running = env.active.copy()
            actions = mlp_forward(policy, obs * scale)[0]
            obs, _, info = env.step(actions)
            dist = env.q[:, 0] - env.start_x
            upright = running & (info.outcome != Outcome.FALL)
            best = np.where(upright, np.maximum(best, dist), best)
            fell |= running & (info.outcome == Outcome.FALL)
            diverged |= running & info.diverged
    results = []
    for k, s in enumerate(seeds):
        survival = float(env.t[k])
        distance = float(env.q[k, 0] - env.start_x[k])
        outcome = classify_trial(float(best[k]), bool(fell[k]), survival, spec.budget, spec.threshold)
        results.append(TrialResult(policy_id, spec.param.value, float(value), int(s), outcome,
                                   distance, distance / survival if survival > 0 else 0.0, survival))
    return results


def _trial_env(model, base_config, spec: SweepSpec, value: float, seeds) -> LocomotionEnv:
    """Evaluation environments, one per trial seed, with the perturbation applied."""
    if spec.payload is not None:
        model = attach_payload(model, spec.payload)
    cfg = evaluation_config(base_config, spec)
    pert = apply_perturbation(spec.param, value, model, cfg, len(seeds))
    env = LocomotionEnv(pert.model, pert.config, len(seeds),
                        env_seeds=[np.random.SeedSequence(s) for s in seeds], autoreset=False)
    if pert.wrench is not None:
        env.wrench = pert.wrench
    env.sensor_offset[:, model.knee_joints()] = pert.knee_offset
    return env


TRAJECTORY_COLUMNS = (("t",) + tuple(f"q_{n}" for n in DOF_NAMES) + tuple(f"u_{n}" for n in DOF_NAMES)
                      + tuple(f"tau_{n}" for n in DOF_NAMES[NUM_BASE_DOFS:]) + REWARD_NAMES)


def record_trajectory(policy: PolicyParams, model: RobotModel, base_config: EpisodeConfig,
                      spec: SweepSpec, value: float, seed: int) -> list[tuple]:
    """Policy-rate trace of one trial: time, q, u, RMS joint torque and reward terms.

    The first row is the reset state with zero torque and reward terms.
    """
    env = _trial_env(model, base_config, spec, value, [seed])
    obs = env.reset()
    scale = observation_scale(env.config.perceptive)
    rows = [(0.0, *env.q[0], *env.u[0], *np.zeros(model.num_joints), *np.zeros(len(REWARD_NAMES)))]
    with threadpool_limits(limits=1):
        while env.active[0]:
            obs, _, info = env.step(mlp_forward(policy, obs * scale)[0])
            rows.append((float(env.t[0]), *env.q[0], *env.u[0], *info.torque_rms[0],
                         *info.reward_terms[0]))
    return rows


def run_trial(policy, model, base_config, spec: SweepSpec, value: float, seed: int,
              policy_id: str = "policy") -> TrialResult:
    return run_trials(policy, policy_id, model, base_config, spec, value, [seed])[0]


@dataclass
class SuccessCurve:
    policy_id: str
    param: str
    values: np.ndarray
    trials: np.ndarray
    successes: np.ndarray
    ci_halfwidth: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.trials = np.asarray(self.trials, dtype=np.int64)
        self.successes = np.asarray(self.successes, dtype=np.int64)
        if self.ci_halfwidth is None:
            self.ci_halfwidth = wilson_halfwidth(self.successes, self.trials)

    @property
    def rates(self) -> np.ndarray:
        return self.successes / self.trials


def wilson_halfwidth(successes, trials, z: float = 1.96) -> np.ndarray:
    """Half-width of the 95 % Wilson score interval."""
    n = np.asarray(trials, dtype=float)
    p = np.asarray(successes, dtype=float) / n
    return z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)


def aggregate(results: list[TrialResult]) -> dict[str, SuccessCurve]:
    """Success curves per policy from raw trial records."""
    curves = {}
    for pid in sorted({r.policy_id for r in results}):
        rows = [r for r in results if r.policy_id == pid]
        params = {r.param for r in rows}
        if len(params) != 1:
            raise HarnessError(f"policy {pid} mixes sweep parameters {sorted(params)}")
        values = sorted({r.value for r in rows})
        trials = [sum(1 for r in rows if r.value == v) for v in values]
        wins = [sum(1 for r in rows if r.value == v and r.outcome is TrialOutcome.SUCCESS)
                for v in values]
        curves[pid] = SuccessCurve(pid, params.pop(), values, trials, wins)
    return curves


def _run_batch(args):
    policy, pid, model, config, spec, value = args
    return run_trials(policy, pid, model, config, spec, value)


def run_sweep(policies: dict, spec: SweepSpec, model: RobotModel, base_config: EpisodeConfig,
              workers: int | None = None) -> tuple[list[TrialResult], dict[str, SuccessCurve]]:
    """Evaluate every policy at every grid value; returns raw records and curves.

    ``policies`` maps ids to :class:`PolicyParams` or checkpoint paths; all
    paths are loaded before any trial runs.  Results are ordered by
    (policy, value, seed) whatever the number of workers.
    """
    if not policies:
        raise HarnessError("need at least one policy")
    loaded = {}
    for pid, p in policies.items():
        if isinstance(p, PolicyParams):
            loaded[pid] = p
        else:
            if not os.path.exists(p):
                raise FileNotFoundError(f"checkpoint not found: {p}")
            loaded[pid] = load_checkpoint(p)
    for v in spec.grid:
        apply_perturbation(spec.param, v, model, base_config)
    jobs = [(loaded[pid], pid, model, base_config, spec, v) for pid in sorted(loaded) for v in spec.grid]
    workers = workers or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_batch, jobs))
    else:
        batches = [_run_batch(j) for j in jobs]
    results = [r for b in batches for r in b]
    results.sort(key=lambda r: (r.policy_id, r.value, r.seed))
    return results, aggregate(results)


def average_curves(curves: list[SuccessCurve], policy_id: str) -> SuccessCurve:
    """Pool seeds of one method: trials and successes are summed per grid value."""
    _check_grids(curves)
    c0 = curves[0]
    return SuccessCurve(policy_id, c0.param, c0.values, sum(c.trials for c in curves),
                        sum(c.successes for c in curves))


def _check_grids(curves):
    c0 = curves[0]
    for c in curves[1:]:
        if c.param != c0.param or not np.array_equal(c.values, c0.values):
            raise HarnessError("curves must share parameter and grid")


@dataclass
class Comparison:
    """Mean success-rate difference of ``a`` over ``b`` for each ordered pair."""

    pairs: dict[tuple[str, str], float]
    mask: np.ndarray

    def best(self) -> str:
        ids = sorted({a for a, _ in self.pairs})
        return max(ids, key=lambda a: sum(d for (x, _), d in self.pairs.items() if x == a))

    def table(self) -> str:
        lines = ["policy_a,policy_b,mean_rate_difference"]
        lines += [f"{a},{b},{d:.6f}" for (a, b), d in sorted(self.pairs.items())]
        return "\n".join(lines)


def summarize_comparison(curves: list[SuccessCurve], min_value: float = -math.inf,
                         max_value: float = math.inf) -> Comparison:
    """Pairwise mean rate differences over the grid points in [min_value, max_value]."""
    if len(curves) < 1:
        raise HarnessError("need at least one curve")
    _check_grids(curves)
    v = curves[0].values
    mask = (v >= min_value) & (v <= max_value)
    if not mask.any():
        raise HarnessError("no grid point in the requested range")
    pairs = {}
    for a in curves:
        for b in curves:
            if a.policy_id != b.policy_id:
                pairs[(a.policy_id, b.policy_id)] = float(np.mean(a.rates[mask] - b.rates[mask]))
    return Comparison(pairs, mask)
