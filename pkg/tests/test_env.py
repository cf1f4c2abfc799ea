import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from erfi.actuation import InjectionConfig, InjectionMode
from erfi.env import (
    BLIND_OBS,
    PERCEPTIVE_OBS,
    REWARD_NAMES,
    Command,
    DomainRandomization,
    EpisodeConfig,
    LocomotionEnv,
    Outcome,
    RewardWeights,
    apply_domain_randomization,
    build_observation,
    check_termination,
    compute_reward,
    sample_command,
)
from erfi.actuation import ImpedanceGains
from erfi.model import build_model, serialize_model
from erfi.terrain import TerrainKind, TerrainProfile

MODEL = build_model()
H0 = MODEL.nominal_standing_height()


def nominal_q(pitch=0.0, height=H0):
    q = np.zeros(7)
    q[1], q[2] = height, pitch
    q[3:] = MODEL.nominal_joint_positions
    return q


def zero_hist():
    return np.zeros((3, 4)), np.zeros((3, 4))


# -- reset ---------------------------------------------------------------
def test_reset_without_injection_or_dr_is_nominal_pose():
    env = LocomotionEnv(MODEL, EpisodeConfig(), 3)
    env.reset()
    for i in range(3):
        assert np.array_equal(env.q[i], nominal_q())
        assert np.array_equal(env.u[i], np.zeros(7))
    assert np.all(env.tau_o == 0.0)


def test_reset_places_feet_on_the_ground():
    from erfi.dynamics import forward_kinematics

    feet = forward_kinematics(MODEL, nominal_q()).feet
    assert np.allclose(feet[:, 1], 0.0, atol=1e-12)


def test_dr_mass_scale_is_uniform_over_resets():
    dr = DomainRandomization(mass_scale=(0.9, 1.1))
    env = LocomotionEnv(MODEL, EpisodeConfig(dr=dr), 100)
    torso = MODEL.masses[0]
    scales = []
    for _ in range(100):
        env.reset()
        scales.extend(m.masses[0] / torso for m in env.models.models)
    scales = np.array(scales)
    assert len(scales) == 10_000
    assert scales.min() >= 0.9 and scales.max() <= 1.1
    assert stats.kstest(scales, stats.uniform(loc=0.9, scale=0.2).cdf).pvalue > 0.01


def test_rao_offsets_within_limits_and_constant_in_episode():
    cfg = EpisodeConfig(injection=InjectionConfig(InjectionMode.RAO, 0.0, 3.0))
    env = LocomotionEnv(MODEL, cfg, 8)
    env.reset()
    first = env.tau_o.copy()
    assert np.all(np.abs(first) <= 3.0) and np.any(first != 0)
    for _ in range(20):
        env.step(np.zeros((8, 4)))
        assert np.array_equal(env.tau_o, first)
    env.reset()
    assert not np.array_equal(env.tau_o, first)


# -- observations --------------------------------------------------------
def test_observation_of_level_robot_at_rest():
    err, vel = zero_hist()
    q = nominal_q()
    obs = build_observation(q, np.zeros(7), np.zeros(4), 0.0, err, vel, TerrainProfile(), True)
    assert obs.shape == (PERCEPTIVE_OBS,)
    assert np.array_equal(obs[:2], [0.0, -1.0])
    assert np.all(obs[2:BLIND_OBS] == 0.0)
    assert np.allclose(obs[BLIND_OBS:], -H0)


def test_observation_lengths():
    env_b = LocomotionEnv(MODEL, EpisodeConfig(), 2)
    env_p = LocomotionEnv(MODEL, EpisodeConfig(perceptive=True), 2)
    assert env_b.reset().shape == (2, BLIND_OBS) == (2, 34)
    assert env_p.reset().shape == (2, PERCEPTIVE_OBS) == (2, 45)


@given(st.floats(-1.0, 1.0))
def test_gravity_field_rotates_with_pitch(pitch):
    err, vel = zero_hist()
    obs = build_observation(nominal_q(pitch), np.zeros(7), np.zeros(4), 0.0, err, vel)
    assert obs[0] == pytest.approx(math.sin(pitch), abs=1e-15)
    assert obs[1] == pytest.approx(-math.cos(pitch), abs=1e-15)


def test_observation_field_order():
    err = np.arange(12.0).reshape(3, 4)
    vel = -np.arange(12.0).reshape(3, 4)
    u = np.zeros(7)
    u[:3] = [0.3, -0.1, 0.7]
    obs = build_observation(nominal_q(), u, np.array([1, 2, 3, 4.0]), 0.5, err, vel)
    assert np.allclose(obs[2:5], [0.3, -0.1, 0.7])
    assert np.array_equal(obs[5:17], err.ravel())
    assert np.array_equal(obs[17:29], vel.ravel())
    assert np.array_equal(obs[29:33], [1, 2, 3, 4])
    assert obs[33] == 0.5


def test_history_is_ordered_oldest_first():
    env = LocomotionEnv(MODEL, EpisodeConfig(), 1)
    env.reset()
    errs = []
    for k in range(3):
        a = np.full((1, 4), 0.1 * (k + 1))
        env.step(a)
        errs.append(env.q_des[0] - env.q[0, 3:])
    assert np.allclose(env.err_hist[0], np.array(errs))


# -- reward --------------------------------------------------------------
def reward(vx=0.0, command=0.0, **kw):
    u = np.zeros(7)
    u[0] = vx
    args = dict(q=nominal_q(), u=u, u_prev=u, tau=np.zeros(4), action=np.zeros(4),
                prev_action=np.zeros(4), command=command, weights=RewardWeights(), dt=0.02)
    args.update(kw)
    return compute_reward(**args)


def test_perfect_tracking_gives_unit_velocity_term():
    r = reward(0.5, 0.5)
    assert r["velocity"] == 1.0


def test_velocity_error_half_gives_exp_minus_one():
    assert reward(0.0, 0.5)["velocity"] == pytest.approx(math.exp(-1), rel=1e-12)


def test_all_zero_inputs_zero_penalties():
    r = reward()
    for name in ("torque", "action_rate", "orientation", "joint_acc"):
        assert r[name] == 0.0


@given(st.lists(st.floats(-3, 3), min_size=16, max_size=16), st.floats(-1, 1))
def test_total_is_weighted_sum_of_terms(vals, command):
    v = np.array(vals)
    q = nominal_q(v[0] * 0.3)
    u, u_prev = np.zeros(7), np.zeros(7)
    u[:3], u_prev[3:] = v[1:4], v[4:8]
    tau, action, prev = v[8:12], v[12:16], v[8:12][::-1]
    w = RewardWeights()
    r = compute_reward(q, u, u_prev, tau, action, prev, command, w, 0.02)
    expected = {
        "velocity": math.exp(-(u[0] - command) ** 2 / 0.25),
        "angular": math.exp(-u[2] ** 2 / 0.25),
        "torque": -sum(t * t for t in tau),
        "action_rate": -sum((a - b) ** 2 for a, b in zip(action, prev)),
        "orientation": -math.sin(q[2]) ** 2,
        "joint_acc": -sum(((a - b) / 0.02) ** 2 for a, b in zip(u[3:], u_prev[3:])),
    }
    total = 0.0
    for name in REWARD_NAMES:
        assert r[name] == pytest.approx(expected[name], rel=1e-12, abs=1e-12)
        total += getattr(w, name) * expected[name]
    assert r.total == pytest.approx(total, rel=1e-12, abs=1e-12)


# -- commands ------------------------------------------------------------
def test_fixed_evaluation_command_is_exact():
    rng = np.random.default_rng(0)
    assert all(sample_command(rng, (0.5, 0.5)).vx == 0.5 for _ in range(100))
    assert all(sample_command(rng, (0.0, 0.0)).vx == 0.0 for _ in range(100))


def test_training_commands_are_centered():
    rng = np.random.default_rng(1)
    v = np.array([sample_command(rng).vx for _ in range(100_000)])
    assert abs(v.mean()) < 0.02
    assert v.min() >= -1.0 and v.max() <= 1.0


def test_command_bounds():
    with pytest.raises(ValueError):
        Command(1.5)
    with pytest.raises(ValueError):
        Command(0.5, vy=0.1)


# -- termination ---------------------------------------------------------
def test_termination_battery():
    assert check_termination(nominal_q(), MODEL, 0.0, 8.0) == Outcome.RUNNING
    assert check_termination(nominal_q(pitch=1.5), MODEL, 0.0, 8.0) == Outcome.FALL
    assert check_termination(nominal_q(), MODEL, 8.0, 8.0) == Outcome.TIMEOUT
    assert check_termination(nominal_q(height=0.2 * H0), MODEL, 0.0, 8.0) == Outcome.FALL
    assert check_termination(nominal_q(pitch=-1.01), MODEL, 0.0, 8.0) == Outcome.FALL
    assert check_termination(nominal_q(pitch=0.99), MODEL, 0.0, 8.0) != Outcome.FALL


def test_fall_takes_precedence_over_timeout():
    assert check_termination(nominal_q(pitch=1.5), MODEL, 8.0, 8.0) == Outcome.FALL


def test_termination_measures_height_above_terrain():
    stairs = TerrainProfile(TerrainKind.STAIRS, step_height=0.2, step_depth=0.3, start_x=-1.0)
    q = nominal_q(height=0.45)
    assert check_termination(q, MODEL, 0.0, 8.0) == Outcome.RUNNING
    assert check_termination(q, MODEL, 0.0, 8.0, stairs) == Outcome.FALL


# -- domain randomization ------------------------------------------------
def test_identity_ranges_leave_model_unchanged():
    gains = ImpedanceGains()
    m, g, mu = apply_domain_randomization(np.random.default_rng(0), MODEL, gains,
                                          DomainRandomization(), 0.5)
    assert m == MODEL
    assert np.array_equal(g.kp, gains.kp) and np.array_equal(g.kd, gains.kd)
    assert np.array_equal(mu, [0.5, 0.5])


def test_dr_bounds_and_immutability():
    before = serialize_model(MODEL)
    rng = np.random.default_rng(0)
    dr = DomainRandomization(mass_scale=(0.8, 1.2), friction=(0.3, 0.7), gain_scale=(0.9, 1.1))
    for _ in range(1000):
        m, g, mu = apply_domain_randomization(rng, MODEL, ImpedanceGains(), dr, 0.5)
        assert 0.8 * 10.0 - 1e-12 <= m.masses[0] <= 1.2 * 10.0 + 1e-12
        assert np.all((mu >= 0.3) & (mu <= 0.7))
        assert 72.0 - 1e-9 <= float(g.kp) <= 88.0 + 1e-9
    assert serialize_model(MODEL) == before


def test_dr_rejects_invalid_ranges():
    with pytest.raises(ValueError):
        DomainRandomization(mass_scale=(1.2, 0.8))


# -- stepping ------------------------------------------------------------
def test_policy_period_from_decimation():
    cfg = EpisodeConfig(policy_rate=50.0, decimation=8)
    assert cfg.policy_dt == pytest.approx(0.02)
    assert cfg.dt == pytest.approx(1 / 400)
    with pytest.raises(ValueError):
        EpisodeConfig(decimation=0)


def test_zero_action_stands_for_two_seconds():
    env = LocomotionEnv(MODEL, EpisodeConfig(), 2, autoreset=False)
    env.reset()
    for _ in range(100):
        _, _, info = env.step(np.zeros((2, 4)))
        assert np.all(info.outcome == Outcome.RUNNING)
        assert np.all(np.abs(env.q[:, 1] - H0) < 0.2 * H0)
    assert env.t[0] == pytest.approx(2.0)


def rollout(env, steps=30, seed=0):
    acts = np.random.default_rng(seed).normal(0, 0.5, (steps, env.num_envs, 4))
    env.reset()
    out = []
    for a in acts:
        obs, r, _ = env.step(a)
        out.append((obs, r))
    return np.array([o for o, _ in out]), np.array([r for _, r in out])


def test_same_seed_is_deterministic():
    cfg = EpisodeConfig(injection=InjectionConfig(InjectionMode.ERFI_50), terrain="STAIRS", seed=4)
    a = rollout(LocomotionEnv(MODEL, cfg, 4))
    b = rollout(LocomotionEnv(MODEL, cfg, 4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_streams_are_isolated_under_permutation():
    cfg = EpisodeConfig(injection=InjectionConfig(InjectionMode.RFI),
                        dr=DomainRandomization(mass_scale=(0.9, 1.1)))
    seeds = [11, 22, 33]
    perm = [2, 0, 1]
    modes = [InjectionMode.RFI] * 3
    env_a = LocomotionEnv(MODEL, cfg, 3, env_seeds=seeds, modes=modes)
    env_b = LocomotionEnv(MODEL, cfg, 3, env_seeds=[seeds[p] for p in perm], modes=modes)
    acts = np.random.default_rng(0).normal(0, 0.5, (20, 3, 4))
    env_a.reset(), env_b.reset()
    for a in acts:
        oa, ra, _ = env_a.step(a)
        ob, rb, _ = env_b.step(a[perm])
        assert np.array_equal(oa[perm], ob) and np.array_equal(ra[perm], rb)


def test_non_finite_action_is_a_fall():
    env = LocomotionEnv(MODEL, EpisodeConfig(), 2, autoreset=False)
    env.reset()
    a = np.zeros((2, 4))
    a[1, 2] = np.nan
    _, r, info = env.step(a)
    assert info.outcome[0] == Outcome.RUNNING
    assert info.outcome[1] == Outcome.FALL and info.diverged[1]
    assert np.isfinite(r).all()
    assert not env.active[1]


def test_autoreset_starts_new_episode():
    env = LocomotionEnv(MODEL, EpisodeConfig(max_duration=0.1), 1)
    env.reset()
    for _ in range(4):
        env.step(np.zeros((1, 4)))
    _, _, info = env.step(np.zeros((1, 4)))
    assert info.outcome[0] == Outcome.TIMEOUT and info.episode_length[0] == 5
    assert env.t[0] == 0.0 and env.ep_length[0] == 0
