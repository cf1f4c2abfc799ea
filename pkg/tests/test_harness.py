import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from erfi.env import EpisodeConfig
from erfi.harness import (
    HarnessError,
    PayloadSpec,
    SuccessCurve,
    SweepParam,
    SweepSpec,
    TrialOutcome,
    TrialResult,
    aggregate,
    apply_perturbation,
    attach_payload,
    average_curves,
    classify_trial,
    default_grid,
    nominal_value,
    parameter_range,
    run_sweep,
    run_trials,
    summarize_comparison,
    wilson_halfwidth,
)
from erfi.model import build_model
from erfi.nn import init_params

MODEL = build_model()
CFG = EpisodeConfig()


def standing_policy(seed=0):
    # output layer scaled to zero: the robot holds its nominal pose
    return init_params(np.random.default_rng(seed), (34, 16, 4), output_gain=0.0)


# -- success classification ---------------------------------------------
@pytest.mark.parametrize("distance,fell,survival,expected", [
    (2.6, False, 8.0, TrialOutcome.SUCCESS),
    (2.5, False, 8.0, TrialOutcome.SUCCESS),
    (2.4999999, False, 8.0, TrialOutcome.STALL),
    (2.4, False, 8.0, TrialOutcome.STALL),
    (0.3, True, 1.2, TrialOutcome.FALL),
    (3.0, True, 7.9, TrialOutcome.FALL),
    (3.0, True, 8.0, TrialOutcome.FALL),
    (3.0, False, 7.0, TrialOutcome.TIMEOUT),
])
def test_classification_boundary(distance, fell, survival, expected):
    assert classify_trial(distance, fell, survival) is expected


def test_classification_exhaustive_grid():
    distances = [0.0, 1.0, 2.49, 2.5 - 1e-12, 2.5, 2.5 + 1e-12, 2.6, 10.0]
    survivals = [0.0, 1.2, 7.98, 8.0 - 1e-12, 8.0]
    for d, fell, s in itertools.product(distances, [False, True], survivals):
        out = classify_trial(d, fell, s)
        expected_success = (not fell) and d >= 2.5 and s >= 8.0 - 1e-9
        assert (out is TrialOutcome.SUCCESS) == expected_success
        if fell:
            assert out is TrialOutcome.FALL


@given(st.floats(0, 20), st.booleans(), st.floats(0, 8), st.floats(1, 10), st.floats(0.5, 5))
def test_classification_is_pure_function(d, fell, s, budget, threshold):
    a = classify_trial(d, fell, s, budget, threshold)
    assert a is classify_trial(d, fell, s, budget, threshold)
    assert (a is TrialOutcome.SUCCESS) == (not fell and d >= threshold and s >= budget - 1e-9)


# -- perturbations -------------------------------------------------------
def test_nominal_mass_scale_is_identity():
    assert apply_perturbation("BASE_MASS_SCALE", 1.0, MODEL, CFG).model is MODEL


UPPER_HALF_START = 1.6


def test_mass_grid_ends():
    lo, hi = parameter_range(SweepParam.BASE_MASS_SCALE, MODEL)
    assert lo == pytest.approx(22 / 27) and hi == pytest.approx(65 / 27)
    grid = default_grid(SweepParam.BASE_MASS_SCALE, MODEL)
    assert grid[0] == lo and grid[-1] == hi and UPPER_HALF_START in grid


@pytest.mark.parametrize("param", list(SweepParam))
def test_default_grid_is_admissible(param):
    for v in default_grid(param, MODEL):
        apply_perturbation(param, v, MODEL, CFG)


def test_training_friction_is_nominal():
    p = apply_perturbation("FRICTION_MU", 0.5, MODEL, CFG)
    assert p.config.friction == CFG.friction == 0.5
    assert nominal_value(SweepParam.FRICTION_MU, CFG) == 0.5


def test_force_schedules():
    p = apply_perturbation("EXT_FORCE_N", 30.0, MODEL, CFG, num_trials=3)
    assert np.allclose(p.wrench.force, [[30.0, 0.0]] * 3)
    assert np.all(p.wrench.start == 2.0) and np.all(p.wrench.duration == 3.0)
    d = apply_perturbation("EXT_FORCE_DURATION_S", 1.5, MODEL, CFG)
    assert d.wrench.force[0, 0] == pytest.approx(50.0 * 14.0 / 54.0)
    assert d.wrench.duration[0] == 1.5
    t = apply_perturbation("EXT_TORQUE_NM", 5.0, MODEL, CFG)
    assert t.wrench.torque[0] == 5.0 and t.wrench.duration[0] == 1.0


def test_other_perturbations():
    assert apply_perturbation("GRAVITY_MS2", -5.0, MODEL, CFG).config.gravity == -5.0
    assert apply_perturbation("KNEE_OFFSET_RAD", 0.1, MODEL, CFG).knee_offset == 0.1
    assert apply_perturbation("PAYLOAD", 1.2, MODEL, CFG).model.total_mass == pytest.approx(15.2)


def test_perturbation_errors_and_purity():
    with pytest.raises(HarnessError):
        apply_perturbation("WIND", 1.0, MODEL, CFG)
    with pytest.raises(HarnessError):
        apply_perturbation("FRICTION_MU", 0.9, MODEL, CFG)
    apply_perturbation("BASE_MASS_SCALE", 2.0, MODEL, CFG)
    assert MODEL.masses[0] == 10.0


# -- payload -------------------------------------------------------------
def test_zero_payload_is_identity():
    assert attach_payload(MODEL, PayloadSpec(mass=0.0)) is MODEL


def test_payload_composite_com():
    assert MODEL.com_offsets[0] == (0.0, 0.0)
    m = attach_payload(MODEL, PayloadSpec(1.0, (0.0, 0.1)))
    assert m.masses[0] == 11.0
    assert m.com_offsets[0][1] == pytest.approx(0.1 / 11, abs=1e-15)


@given(st.floats(0.01, 10), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_payload_parallel_axis(mass, px, pz):
    m = attach_payload(MODEL, PayloadSpec(mass, (px, pz)))
    c = np.array(m.com_offsets[0])
    # inertia about the torso origin is additive
    about_origin = m.inertias[0] + m.masses[0] * c @ c
    assert about_origin == pytest.approx(MODEL.inertias[0] + mass * (px * px + pz * pz), rel=1e-12)
    assert m.inertias[0] >= MODEL.inertias[0]
    assert m.nominal_mass == pytest.approx(MODEL.nominal_mass + mass)


def test_negative_payload_rejected():
    with pytest.raises(HarnessError):
        PayloadSpec(mass=-1.0)


# -- aggregation ---------------------------------------------------------
def trial(pid, value, seed, outcome):
    return TrialResult(pid, "BASE_MASS_SCALE", value, seed, outcome, 0.0, 0.0, 8.0)


def test_rate_counting():
    res = [trial("a", 1.0, s, o) for s, o in enumerate(
        [TrialOutcome.SUCCESS] * 3 + [TrialOutcome.FALL])]
    c = aggregate(res)["a"]
    assert c.rates[0] == 0.75 and c.trials[0] == 4


def test_wilson_interval_matches_scipy():
    ci = stats.binomtest(30, 50).proportion_ci(0.95, method="wilson")
    assert wilson_halfwidth(30, 50) == pytest.approx((ci.high - ci.low) / 2, rel=1e-3)


def curve(pid, rates, n=10):
    return SuccessCurve(pid, "BASE_MASS_SCALE", [1.0, 1.6, 2.0], [n] * 3,
                        [round(r * n) for r in rates])


def test_comparison_examples():
    same = summarize_comparison([curve("a", [0.5] * 3), curve("b", [0.5] * 3)])
    assert same.pairs[("a", "b")] == 0.0
    diff = summarize_comparison([curve("a", [1.0] * 3), curve("b", [0.5] * 3)])
    assert diff.pairs[("a", "b")] == 0.5 and diff.pairs[("b", "a")] == -0.5
    assert diff.best() == "a"
    hand = summarize_comparison([curve("a", [0.9, 0.6, 0.2]), curve("b", [0.8, 0.7, 0.0])])
    assert hand.pairs[("a", "b")] == pytest.approx((0.1 - 0.1 + 0.2) / 3)
    upper = summarize_comparison([curve("a", [0.9, 0.6, 0.2]), curve("b", [0.8, 0.7, 0.0])], 1.6)
    assert upper.pairs[("a", "b")] == pytest.approx(0.05)


def test_comparison_rejects_mismatched_grids():
    other = SuccessCurve("b", "BASE_MASS_SCALE", [1.0, 1.5, 2.0], [10] * 3, [5] * 3)
    with pytest.raises(HarnessError):
        summarize_comparison([curve("a", [0.5] * 3), other])


def test_average_curves_pools_trials():
    avg = average_curves([curve("s0", [1.0, 0.5, 0.0]), curve("s1", [0.0, 0.5, 1.0])], "m")
    assert np.array_equal(avg.trials, [20] * 3) and np.allclose(avg.rates, 0.5)


def test_sweep_spec_validation():
    with pytest.raises(HarnessError):
        SweepSpec("BASE_MASS_SCALE", (2.0, 1.0))
    with pytest.raises(HarnessError):
        SweepSpec("BASE_MASS_SCALE", ())
    with pytest.raises(HarnessError):
        SweepSpec("BASE_MASS_SCALE", (1.0,), trials=0)


# -- rollouts ------------------------------------------------------------
SPEC = SweepSpec("BASE_MASS_SCALE", (1.0, 2.0), trials=3, budget=1.0, threshold=0.5)


def test_standing_policy_stalls():
    res = run_trials(standing_policy(), "p", MODEL, CFG, SPEC, 1.0)
    assert [r.seed for r in res] == SPEC.trial_seeds
    assert all(r.outcome is TrialOutcome.STALL for r in res)
    assert all(r.survival == pytest.approx(1.0) for r in res)


def test_paired_trials_match_across_policies():
    res, curves = run_sweep({"a": standing_policy(), "b": standing_policy()}, SPEC, MODEL, CFG)
    a = [r for r in res if r.policy_id == "a"]
    b = [r for r in res if r.policy_id == "b"]
    assert [(r.value, r.seed, r.distance, r.outcome) for r in a] == \
           [(r.value, r.seed, r.distance, r.outcome) for r in b]


def test_sweep_independent_of_worker_count():
    pols = {"a": standing_policy(0), "b": standing_policy(1)}
    one = run_sweep(pols, SPEC, MODEL, CFG, workers=1)[0]
    two = run_sweep(pols, SPEC, MODEL, CFG, workers=2)[0]
    assert one == two


def test_missing_checkpoint_fails_before_trials(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_sweep({"a": standing_policy(), "b": str(tmp_path / "nope.ckpt")}, SPEC, MODEL, CFG)
    with pytest.raises(HarnessError):
        run_sweep({}, SPEC, MODEL, CFG)


def test_rates_recomputable_from_trials():
    res, curves = run_sweep({"a": standing_policy()}, SPEC, MODEL, CFG)
    again = aggregate(res)["a"]
    assert np.array_equal(again.successes, curves["a"].successes)
    assert np.array_equal(again.ci_halfwidth, curves["a"].ci_halfwidth)


def test_trajectory_matches_trial():
    from erfi.harness import TRAJECTORY_COLUMNS, record_trajectory

    policy = init_params(np.random.default_rng(3), (34, 16, 4), output_gain=0.3)
    seed = SPEC.trial_seeds[1]
    rows = record_trajectory(policy, MODEL, CFG, SPEC, 2.0, seed)
    trial = run_trials(policy, "p", MODEL, CFG, SPEC, 2.0, [seed])[0]
    assert all(len(r) == len(TRAJECTORY_COLUMNS) for r in rows)
    assert rows[-1][0] == pytest.approx(trial.survival)
    assert rows[-1][1] - rows[0][1] == pytest.approx(trial.distance, abs=1e-12)
    assert len(rows) == round(trial.survival / CFG.policy_dt) + 1
