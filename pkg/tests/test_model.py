import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from erfi.model import (
    ModelError,
    ModelParams,
    build_model,
    parse_model,
    scale_torso_mass,
    serialize_model,
    validate_quadruped,
)


def test_default_model_mass_and_topology():
    m = build_model()
    assert m.nominal_mass == pytest.approx(14.0)
    assert m.total_mass == pytest.approx(14.0)
    assert m.num_joints == 4 and m.num_dofs == 7 and m.num_feet == 2


def test_zero_torso_mass_rejected():
    with pytest.raises(ModelError):
        build_model(ModelParams(torso_mass=0.0))


@pytest.mark.parametrize("field,value", [("thigh_length", -0.3), ("torque_limit", 0.0),
                                         ("knee_lower", 0.5)])
def test_invalid_parameters_rejected(field, value):
    with pytest.raises(ModelError):
        build_model(ModelParams(**{field: value}))


def test_serialize_round_trip_is_exact():
    m = build_model()
    assert parse_model(serialize_model(m)) == m


@given(st.floats(0.5, 3.0), st.floats(0.15, 0.45))
def test_round_trip_for_custom_parameters(torso_mass, length):
    m = build_model(ModelParams(torso_mass=torso_mass, thigh_length=length, shank_length=length))
    assert parse_model(serialize_model(m)) == m


def test_knee_limits_mirror_between_legs():
    m = build_model()
    lo, hi = np.asarray(m.joint_lower), np.asarray(m.joint_upper)
    front, hind = m.knee_joints()
    assert (lo[front], hi[front]) == (-2.5, 0.0)
    assert (lo[hind], hi[hind]) == (0.0, 2.5)
    nominal = np.asarray(m.nominal_joint_positions)
    assert nominal[front] == -nominal[hind]


def test_nominal_pose_within_limits():
    m = build_model()
    q = np.asarray(m.nominal_joint_positions)
    assert np.all(q >= np.asarray(m.joint_lower)) and np.all(q <= np.asarray(m.joint_upper))


@given(st.floats(0.5, 2.5))
def test_scale_torso_mass(scale):
    m = build_model()
    s = scale_torso_mass(m, scale)
    assert s.masses[0] == pytest.approx(10.0 * scale)
    assert s.inertias[0] == pytest.approx(m.inertias[0] * scale)
    assert s.masses[1:] == m.masses[1:]
    assert s.nominal_mass == pytest.approx(sum(s.masses))


def test_scale_torso_mass_rejects_nonpositive():
    with pytest.raises(ModelError):
        scale_torso_mass(build_model(), 0.0)


def test_model_is_immutable():
    m = build_model()
    with pytest.raises(dataclasses.FrozenInstanceError):
        m.nominal_mass = 1.0


def test_quadruped_validation():
    m = build_model()
    validate_quadruped(m)
    with pytest.raises(ModelError):
        validate_quadruped(dataclasses.replace(m, foot_links=m.foot_links[:1],
                                               foot_offsets=m.foot_offsets[:1]))
