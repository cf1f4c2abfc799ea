import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from erfi.actuation import (
    ImpedanceGains,
    InjectionConfig,
    InjectionMode,
    assign_injection_modes,
    check_base_injection,
    compute_torque,
    response_metrics,
    run_step_response,
    sample_episode_offset,
    sample_step_injection,
)

STEP_GAINS = ImpedanceGains(15.0, 1.0)


def test_impedance_law_example():
    tau = compute_torque(ImpedanceGains(80.0, 2.0), 0.1, 0.0, 0.0)
    assert tau == pytest.approx(8.0, abs=1e-12)


@given(st.lists(st.floats(-3, 3), min_size=12, max_size=12),
       st.lists(st.floats(-10, 10), min_size=8, max_size=8))
def test_torque_adds_injections_before_clamp(vals, inj):
    q_des, q, dq = np.reshape(vals, (3, 4))
    tau_r, tau_o = np.reshape(inj, (2, 4))
    g = ImpedanceGains(80.0, 2.0)
    lim = np.full(4, 12.0)
    out = compute_torque(g, q_des, q, dq, tau_r, tau_o, lim)
    ref = np.clip(80.0 * (q_des - q) - 2.0 * dq + tau_r + tau_o, -12.0, 12.0)
    assert np.allclose(out, ref, rtol=0, atol=1e-12)
    assert np.all(np.abs(out) <= 12.0)


def test_zero_limits_match_plain_impedance_bit_exactly():
    rng = np.random.default_rng(0)
    g = ImpedanceGains(80.0, 2.0)
    q_des, q, dq = rng.normal(size=(3, 4))
    lim = np.full(4, 12.0)
    plain = np.clip(g.kp * (q_des - q) - g.kd * dq, -lim, lim)
    for mode in InjectionMode:
        cfg = InjectionConfig(mode, 0.0, 0.0)
        tau_r = sample_step_injection(rng, cfg.step_limit)
        tau_o = sample_episode_offset(rng, cfg.offset_limit).tau
        assert np.array_equal(compute_torque(g, q_des, q, dq, tau_r, tau_o, lim), plain)


def test_mode_selects_injection_terms():
    cfg = InjectionConfig(tau_lim_r=3.0, tau_lim_o=5.0)
    limits = {m: (cfg.for_mode(m).step_limit, cfg.for_mode(m).offset_limit) for m in InjectionMode}
    assert limits[InjectionMode.NONE] == (0.0, 0.0)
    assert limits[InjectionMode.RFI] == (3.0, 0.0)
    assert limits[InjectionMode.RAO] == (0.0, 5.0)
    assert limits[InjectionMode.ERFI_C] == (3.0, 5.0)


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        InjectionConfig(tau_lim_r=-1.0)
    with pytest.raises(ValueError):
        InjectionConfig(mode="BOGUS")
    with pytest.raises(ValueError):
        ImpedanceGains(0.0, 1.0)


def test_step_injection_zero_limit():
    assert np.array_equal(sample_step_injection(np.random.default_rng(0), 0.0), np.zeros(4))


def test_step_injection_statistics():
    x = sample_step_injection(np.random.default_rng(1), 20.0, 1, size=1_000_000)
    assert abs(x.mean()) < 0.1
    assert x.min() >= -20.0 and x.max() <= 20.0


def test_step_injection_reproducible_and_fresh():
    a = sample_step_injection(np.random.default_rng(5), 4.0, size=50)
    b = sample_step_injection(np.random.default_rng(5), 4.0, size=50)
    assert np.array_equal(a, b)
    assert np.all(np.any(a[1:] != a[:-1], axis=1))


def test_episode_offset_zero_and_variance():
    assert np.array_equal(sample_episode_offset(np.random.default_rng(0), 0.0).tau, np.zeros(4))
    rng = np.random.default_rng(2)
    x = np.array([sample_episode_offset(rng, 20.0, 1).tau[0] for _ in range(10_000)])
    assert x.var() == pytest.approx(400.0 / 3.0, rel=0.05)
    assert np.all(np.abs(x) <= 20.0)


def test_negative_limits_rejected():
    with pytest.raises(ValueError):
        sample_step_injection(np.random.default_rng(0), -1.0)
    with pytest.raises(ValueError):
        sample_episode_offset(np.random.default_rng(0), -1.0)


@given(st.integers(1, 5000))
def test_erfi50_split_is_ceiling_half(n):
    modes = assign_injection_modes(n, "ERFI_50")
    assert len(modes) == n
    assert modes.count(InjectionMode.RFI) == math.ceil(n / 2)
    assert modes.count(InjectionMode.RAO) == n // 2


def test_split_examples():
    modes = assign_injection_modes(4096, InjectionMode.ERFI_50)
    assert modes.count(InjectionMode.RFI) == 2048 == modes.count(InjectionMode.RAO)
    assert assign_injection_modes(1, "ERFI_50") == [InjectionMode.RFI]
    assert assign_injection_modes(3, "RFI") == [InjectionMode.RFI] * 3
    with pytest.raises(ValueError):
        assign_injection_modes(0, "RFI")


def test_base_injection_guard_warns_on_pronking_limits():
    quiet = InjectionConfig(InjectionMode.RFI, f_lim_rb=0.5, tau_lim_rb=0.1)
    loud = InjectionConfig(InjectionMode.RFI, f_lim_rb=500.0, tau_lim_rb=100.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not check_base_injection(quiet, 14.0)
        assert not check_base_injection(InjectionConfig(), 14.0)
    with pytest.warns(RuntimeWarning):
        assert check_base_injection(loud, 14.0)


# -- step response -------------------------------------------------------
def test_deterministic_baseline_has_zero_variance():
    r = run_step_response(STEP_GAINS, 0.17, InjectionConfig(InjectionMode.NONE), 1.0, range(100))
    s = r.summary()
    assert s["rise_time_std"] == 0.0 and s["settling_time_std"] == 0.0
    assert np.all(r.q == r.q[0])
    assert r.steady_state_offset[0] == pytest.approx(0.0, abs=1e-6)


def test_rfi_makes_rise_time_stochastic():
    r = run_step_response(STEP_GAINS, 0.17, InjectionConfig(InjectionMode.RFI, tau_lim_r=10.0),
                          1.0, range(100))
    assert r.summary()["rise_time_std"] > 0.0
    assert np.all(np.isfinite(r.rise_time))


@pytest.mark.parametrize("offset", [5.0, -2.0])
def test_rao_offset_shifts_steady_state(offset):
    r = run_step_response(STEP_GAINS, 0.17, InjectionConfig(InjectionMode.RAO, tau_lim_o=5.0),
                          1.0, range(10), offset=offset)
    assert np.all(np.abs(r.steady_state_offset - offset / 15.0) < 1e-3)


def test_sampled_rao_offset_matches_seed_stream():
    r = run_step_response(STEP_GAINS, 0.17, InjectionConfig(InjectionMode.RAO, tau_lim_o=5.0),
                          1.0, range(20))
    expected = [sample_episode_offset(np.random.default_rng(s), 5.0, 1).tau[0] / 15.0
                for s in range(20)]
    assert np.all(np.abs(r.steady_state_offset - expected) < 1e-3)
    assert np.std(r.steady_state_offset) > 0


def test_response_metrics_on_a_ramp():
    t = np.linspace(0, 1, 101)
    q = np.clip(t, 0, 0.5) * 2.0
    rise, settle = response_metrics(t, q, 0.0, 1.0)
    assert rise == pytest.approx(0.4, abs=1e-9)
    assert settle == pytest.approx(0.48, abs=1e-9)


def test_step_response_rejects_nonpositive_duration():
    with pytest.raises(ValueError):
        run_step_response(STEP_GAINS, 0.17, InjectionConfig(), 0.0, [0])
