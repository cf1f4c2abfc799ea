"""Numerical invariant checks behind ``erfi validate`` and the acceptance tests.

Each check returns a :class:`Check` holding the measured quantity and its
tolerance, so callers can print or assert on the same numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from erfi.actuation import ImpedanceGains, InjectionMode, compute_torque
from erfi.dynamics import (
    GeneralizedState,
    advance,
    angular_momentum,
    contact_jacobian,
    forward_kinematics,
    linear_momentum,
    mass_matrix,
    total_energy,
)
from erfi.model import ModelParams, RobotModel, build_model, with_locked_dofs
from erfi.nn import init_params, mlp_backward, mlp_forward
from erfi.ppo import compute_gae
from erfi.terrain import TerrainProfile


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.value < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} < {self.tolerance:.0e} {self.detail}".rstrip()


def random_configurations(rng: np.random.Generator, model: RobotModel, n: int) -> np.ndarray:
    q = np.zeros((n, model.num_dofs))
    q[:, :2] = rng.uniform(-1, 1, (n, 2))
    q[:, 2] = rng.uniform(-np.pi, np.pi, n)
    lo, hi = np.asarray(model.joint_lower), np.asarray(model.joint_upper)
    q[:, 3:] = rng.uniform(lo, hi, (n, model.num_joints))
    return q


def check_mass_matrix(model: RobotModel | None = None, n: int = 1000, seed: int = 0) -> Check:
    model = model or build_model()
    q = random_configurations(np.random.default_rng(seed), model, n)
    M = mass_matrix(model, q)
    asym = float(np.max(np.abs(M - np.swapaxes(M, 1, 2))))
    min_eig = float(np.min(np.linalg.eigvalsh(M)))
    return Check("mass matrix symmetry", asym, 1e-12, f"(min eigenvalue {min_eig:.3e})")


def check_jacobian(model: RobotModel | None = None, n: int = 1000, seed: int = 1,
                   h: float = 1e-6) -> Check:
    """Foot Jacobian against central differences of forward kinematics."""
    model = model or build_model()
    q = random_configurations(np.random.default_rng(seed), model, n)
    J = contact_jacobian(model, q)
    err = 0.0
    for i in range(model.num_dofs):
        dq = np.zeros(model.num_dofs)
        dq[i] = h
        fp = forward_kinematics(model, q + dq).feet.reshape(n, -1)
        fm = forward_kinematics(model, q - dq).feet.reshape(n, -1)
        err = max(err, float(np.max(np.abs((fp - fm) / (2 * h) - J[:, :, i]))))
    return Check("contact Jacobian vs finite differences", err, 1e-6)


class NoGround:
    """Terrain stand-in that never touches the robot."""

    friction = 0.5

    def contact_geometry(self, x, z):
        x = np.asarray(x, dtype=float)
        normal = np.zeros(x.shape + (2,))
        normal[..., 1] = 1.0
        return np.zeros(x.shape), normal


STANDING_HEIGHT = 0.541


def swing_model() -> RobotModel:
    """Base and hind leg locked, front knee range widened: a free double pendulum.

    The widened range keeps the swing away from joint limits, whose inelastic
    impulses would otherwise (correctly) remove energy.
    """
    return with_locked_dofs(build_model(ModelParams(knee_lower=-3.0, knee_upper=3.0)),
                            (0, 1, 2, 5, 6))


def swing_state(model: RobotModel) -> GeneralizedState:
    """Released at rest from the nominal stance pose, base at standing height."""
    q = np.zeros(model.num_dofs)
    q[1] = STANDING_HEIGHT
    q[3:] = model.nominal_joint_positions
    return GeneralizedState(q, np.zeros(model.num_dofs))


@dataclass(frozen=True)
class EnergyDrift:
    relative: float  # max |E(t) - E(0)| / |E(0)|, potential measured from the ground
    absolute: float  # max |E(t) - E(0)| in joules
    peak_kinetic: float

    @property
    def relative_to_swing(self) -> float:
        """Drift relative to the energy the swing exchanges (datum free, stricter)."""
        return self.absolute / self.peak_kinetic


def energy_drift(dt: float = 0.25e-3, duration: float = 10.0) -> EnergyDrift:
    """Energy error of a torque-free, contact-free swing under gravity."""
    model = swing_model()
    state = swing_state(model)
    ground = NoGround()
    e0 = total_energy(model, state)
    worst = 0.0
    peak_ke = 0.0
    tau = np.zeros(model.num_joints)
    for _ in range(int(round(duration / dt))):
        state, _ = advance(model, state, tau, None, ground, dt)
        worst = max(worst, abs(total_energy(model, state) - e0))
        peak_ke = max(peak_ke, 0.5 * state.u @ mass_matrix(model, state.q) @ state.u)
    return EnergyDrift(worst / abs(e0), worst, peak_ke)


def check_energy(dt: float = 0.25e-3, duration: float = 10.0) -> Check:
    d = energy_drift(dt, duration)
    return Check("energy drift over a conservative swing", d.relative, 1e-3,
                 f"(dt={dt:g}s, {duration:g}s, {d.absolute:.3e} J, "
                 f"{d.relative_to_swing:.3e} of peak kinetic energy)")


def check_momentum(steps: int = 200, seed: int = 2) -> Check:
    """Zero gravity, zero torque, no contact: per-step momentum change."""
    model = build_model()
    rng = np.random.default_rng(seed)
    q = random_configurations(rng, model, 1)[0]
    q[1] = 5.0
    state = GeneralizedState(q, rng.normal(0, 1.0, model.num_dofs))
    terrain = TerrainProfile()
    worst = 0.0
    p0, l0 = linear_momentum(model, state.q, state.u), angular_momentum(model, state.q, state.u)
    for _ in range(steps):
        state, _ = advance(model, state, np.zeros(4), None, terrain, 2.5e-3, gravity=0.0)
        p1, l1 = linear_momentum(model, state.q, state.u), angular_momentum(model, state.q, state.u)
        worst = max(worst, float(np.max(np.abs(p1 - p0))), float(abs(l1 - l0)))
        p0, l0 = p1, l1
    return Check("momentum conservation per step", worst, 1e-9)


def gradient_error(seed: int = 3, probes: int = 1000, h: float = 1e-5) -> float:
    """Max relative error of backprop against central differences on a 3-layer net."""
    rng = np.random.default_rng(seed)
    p = init_params(rng, (6, 8, 7, 3), output_gain=1.0)
    p.biases[0][...] = rng.normal(0, 0.5, p.biases[0].shape)
    x = rng.normal(size=(5, 6))
    g_out = rng.normal(size=(5, 3))

    def loss(params):
        return float(np.sum(mlp_forward(params, x)[0] * g_out))

    out, cache = mlp_forward(p, x)
    grad = mlp_backward(p, cache, g_out)
    n_net = len(p.data) - p.num_std
    idx = rng.choice(n_net, size=probes, replace=probes > n_net)
    worst = 0.0
    for i in idx:
        plus, minus = p.copy(), p.copy()
        plus.data[i] += h
        minus.data[i] -= h
        fd = (loss(plus) - loss(minus)) / (2 * h)
        rel = abs(fd - grad[i]) / max(abs(fd) + abs(grad[i]), 1e-6)
        worst = max(worst, rel)
    return worst


def check_gradients() -> Check:
    return Check("backprop vs finite differences (relative)", gradient_error(), 1e-4)


def brute_force_gae(rewards, values, dones, last_values, gamma, lam):
    """Advantages from the explicit sum ``sum_k (gamma lam)^k delta_{t+k}``."""
    T = len(rewards)
    v_next = np.append(values[1:], last_values)
    adv = np.zeros(T)
    for t in range(T):
        total, factor = 0.0, 1.0
        for k in range(t, T):
            delta = rewards[k] + gamma * v_next[k] * (1 - dones[k]) - values[k]
            total += factor * delta
            if dones[k]:
                break
            factor *= gamma * lam
        adv[t] = total
    return adv


def check_gae(seed: int = 4, cases: int = 200) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        T = int(rng.integers(1, 7))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.3).astype(float)
        lv = rng.normal()
        gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        adv, _ = compute_gae(r[:, None], v[:, None], d[:, None], np.array([lv]), gamma, lam)
        worst = max(worst, float(np.max(np.abs(adv[:, 0] - brute_force_gae(r, v, d, lv, gamma, lam)))))
    return Check("GAE vs brute-force expansion", worst, 1e-12)


def check_injection_identity(seed: int = 5) -> Check:
    """With zero limits every mode reproduces the plain impedance law bit for bit."""
    from erfi.actuation import InjectionConfig
    from erfi.env import EpisodeConfig, LocomotionEnv

    rng = np.random.default_rng(seed)
    gains = ImpedanceGains(80.0, 2.0)
    q_des, q, dq = rng.normal(size=(3, 4))
    lim = np.full(4, 12.0)
    ref = np.clip(gains.kp * (q_des - q) - gains.kd * dq, -lim, lim)
    worst = float(np.max(np.abs(compute_torque(gains, q_des, q, dq, 0.0, 0.0, lim) - ref)))
    model = build_model()
    trajectories = []
    for mode in InjectionMode:
        cfg = EpisodeConfig(injection=InjectionConfig(mode, 0.0, 0.0), command_range=(0.5, 0.5))
        env = LocomotionEnv(model, cfg, 2)
        env.reset()
        acts = np.random.default_rng(seed).normal(0, 0.3, (10, 2, 4))
        for a in acts:
            env.step(a)
        trajectories.append(env.q.copy())
    for tr in trajectories[1:]:
        worst = max(worst, float(np.max(np.abs(tr - trajectories[0]))))
    return Check("zero-limit injection equals plain impedance control", worst, 1e-300)


def run_all(fast: bool = False) -> list[Check]:
    checks = [check_mass_matrix(), check_jacobian(), check_momentum(), check_gradients(),
              check_gae(), check_injection_identity()]
    checks.append(check_energy(duration=2.0 if fast else 10.0))
    return checks
