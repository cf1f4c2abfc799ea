"""Kinematic and inertial description of the planar floating-base quadruped.

The robot lives in the sagittal (x, z) plane.  Link 0 is the floating torso;
every other link hangs off a revolute joint about the lateral (y) axis.  The
default robot has two legs (front and hind), each with a hip and a knee, so
the generalized coordinates are ``(x, z, pitch, hip_f, knee_f, hip_h, knee_h)``.

Angles follow the right-hand rule about +y, so a positive pitch tips the nose
down and a link pointing along -z swings backwards for a positive joint angle.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, fields, replace
from typing import Mapping

import numpy as np

NUM_BASE_DOFS = 3
# generalized coordinates of the default quadruped, in order
DOF_NAMES = ("x", "z", "pitch", "hip_f", "knee_f", "hip_h", "knee_h")


class ModelError(ValueError):
    """Raised when a model parameter set violates a physical invariant."""


Vec2 = tuple[float, float]


@dataclass(frozen=True)
class RobotModel:
    """Immutable tree of rigid links plus actuation limits.

    ``parents[k]`` is the parent link of link ``k`` (``-1`` for the torso);
    link ``k > 0`` is attached through joint ``k - 1`` located at
    ``joint_origins[k - 1]`` in the parent's frame.  Link centres of mass and
    foot points are given in the owning link's frame.
    """

    link_names: tuple[str, ...]
    masses: tuple[float, ...]
    inertias: tuple[float, ...]
    lengths: tuple[float, ...]
    com_offsets: tuple[Vec2, ...]
    parents: tuple[int, ...]
    joint_origins: tuple[Vec2, ...]
    joint_lower: tuple[float, ...]
    joint_upper: tuple[float, ...]
    velocity_limits: tuple[float, ...]
    torque_limits: tuple[float, ...]
    nominal_joint_positions: tuple[float, ...]
    foot_links: tuple[int, ...]
    foot_offsets: tuple[Vec2, ...]
    nominal_mass: float
    torso_height: float = 0.1
    # generalized-velocity indices held at zero (fixed-base sub-models)
    locked_dofs: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.link_names)
        for name in ("masses", "inertias", "lengths", "com_offsets", "parents"):
            if len(getattr(self, name)) != n:
                raise ModelError(f"{name}: expected {n} entries")
        nj = n - 1
        for name in (
            "joint_origins",
            "joint_lower",
            "joint_upper",
            "velocity_limits",
            "torque_limits",
            "nominal_joint_positions",
        ):
            if len(getattr(self, name)) != nj:
                raise ModelError(f"{name}: expected {nj} entries")
        for name in ("masses", "inertias", "lengths"):
            for link, value in zip(self.link_names, getattr(self, name)):
                if not value > 0.0 or not math.isfinite(value):
                    raise ModelError(f"{name}[{link}] must be positive, got {value}")
        if self.parents[0] != -1 or any(p < 0 or p >= k for k, p in enumerate(self.parents) if k > 0):
            raise ModelError("parents: topology must be a tree rooted at the torso (link 0)")
        for k in range(nj):
            if self.joint_lower[k] > self.joint_upper[k]:
                raise ModelError(f"joint_lower[{k}] exceeds joint_upper[{k}]")
            if not (self.torque_limits[k] > 0 and self.velocity_limits[k] > 0):
                raise ModelError(f"actuation limits of joint {k} must be positive")
        if len(self.foot_links) != len(self.foot_offsets):
            raise ModelError("foot_links and foot_offsets differ in length")
        if any(not 0 <= f < n for f in self.foot_links):
            raise ModelError("foot_links: index out of range")
        if not math.isclose(self.nominal_mass, sum(self.masses), rel_tol=1e-12, abs_tol=1e-12):
            raise ModelError("nominal_mass must equal the sum of link masses")
        if self.torso_height <= 0:
            raise ModelError("torso_height must be positive")
        if any(not 0 <= d < self.num_dofs for d in self.locked_dofs):
            raise ModelError("locked_dofs: index out of range")

    @property
    def num_links(self) -> int:
        return len(self.link_names)

    @property
    def num_joints(self) -> int:
        return len(self.link_names) - 1

    @property
    def num_dofs(self) -> int:
        return NUM_BASE_DOFS + self.num_joints

    @property
    def num_feet(self) -> int:
        return len(self.foot_links)

    @property
    def total_mass(self) -> float:
        return float(sum(self.masses))

    @property
    def torso_length(self) -> float:
        return self.lengths[0]

    def chain(self, link: int) -> list[int]:
        """Links from the torso down to ``link`` (inclusive)."""
        out = []
        while link >= 0:
            out.append(link)
            link = self.parents[link]
        return out[::-1]

    def knee_joints(self) -> list[int]:
        """Joint indices whose child link carries a foot (the distal joints)."""
        return [k - 1 for k in self.foot_links if k > 0]

    def nominal_standing_height(self) -> float:
        """Base height that puts the lowest foot at z = 0 in the nominal pose."""
        from erfi.dynamics import forward_kinematics

        q = np.zeros(self.num_dofs)
        q[NUM_BASE_DOFS:] = self.nominal_joint_positions
        feet = forward_kinematics(self, q).feet
        return float(-feet[:, 1].min())


@dataclass
class ModelParams:
    """Flat parameter set for the default two-leg planar quadruped.

    Joint limits and the nominal pose describe the front leg; the hind leg is
    its mirror image, so the knees point towards each other.  (With both knees
    bent the same way the PD-held stance has an unstable shear mode.)
    """

    torso_mass: float = 10.0
    torso_length: float = 0.5
    torso_height: float = 0.1
    torso_inertia: float | None = None
    thigh_mass: float = 1.0
    thigh_length: float = 0.3
    thigh_inertia: float | None = None
    shank_mass: float = 1.0
    shank_length: float = 0.3
    shank_inertia: float | None = None
    hip_x: float = 0.25
    hip_lower: float = -1.5
    hip_upper: float = 1.5
    knee_lower: float = -2.5
    knee_upper: float = 0.0
    velocity_limit: float = 20.0
    torque_limit: float = 12.0
    nominal_hip: float = 0.4
    nominal_knee: float = -0.8


def build_model(config: ModelParams | Mapping[str, float] | None = None) -> RobotModel:
    """Assemble the validated quadruped from a flat parameter set.

    Missing inertias default to a uniform box (torso) or slender rod (legs).
    """
    if config is None:
        p = ModelParams()
    elif isinstance(config, ModelParams):
        p = config
    else:
        names = {f.name for f in fields(ModelParams)}
        unknown = set(config) - names
        if unknown:
            raise ModelError(f"unknown model parameter(s): {sorted(unknown)}")
        p = ModelParams(**{k: (None if v is None else float(v)) for k, v in config.items()})

    for name in ("torso_mass", "thigh_mass", "shank_mass", "torso_length", "thigh_length",
                 "shank_length", "torso_height"):
        value = getattr(p, name)
        if not value > 0:
            raise ModelError(f"{name} must be positive, got {value}")

    torso_inertia = p.torso_inertia
    if torso_inertia is None:
        torso_inertia = p.torso_mass * (p.torso_length**2 + p.torso_height**2) / 12.0
    thigh_inertia = p.thigh_inertia if p.thigh_inertia is not None else p.thigh_mass * p.thigh_length**2 / 12.0
    shank_inertia = p.shank_inertia if p.shank_inertia is not None else p.shank_mass * p.shank_length**2 / 12.0
    for name, value in (("torso_inertia", torso_inertia), ("thigh_inertia", thigh_inertia),
                        ("shank_inertia", shank_inertia)):
        if not value > 0:
            raise ModelError(f"{name} must be positive, got {value}")

    masses = (p.torso_mass, p.thigh_mass, p.shank_mass, p.thigh_mass, p.shank_mass)
    model = RobotModel(
        link_names=("torso", "front_thigh", "front_shank", "hind_thigh", "hind_shank"),
        masses=masses,
        inertias=(torso_inertia, thigh_inertia, shank_inertia, thigh_inertia, shank_inertia),
        lengths=(p.torso_length, p.thigh_length, p.shank_length, p.thigh_length, p.shank_length),
        com_offsets=((0.0, 0.0), (0.0, -p.thigh_length / 2), (0.0, -p.shank_length / 2),
                     (0.0, -p.thigh_length / 2), (0.0, -p.shank_length / 2)),
        parents=(-1, 0, 1, 0, 3),
        joint_origins=((p.hip_x, 0.0), (0.0, -p.thigh_length), (-p.hip_x, 0.0), (0.0, -p.thigh_length)),
        joint_lower=(p.hip_lower, p.knee_lower, -p.hip_upper, -p.knee_upper),
        joint_upper=(p.hip_upper, p.knee_upper, -p.hip_lower, -p.knee_lower),
        velocity_limits=(p.velocity_limit,) * 4,
        torque_limits=(p.torque_limit,) * 4,
        nominal_joint_positions=(p.nominal_hip, p.nominal_knee, -p.nominal_hip, -p.nominal_knee),
        foot_links=(2, 4),
        foot_offsets=((0.0, -p.shank_length), (0.0, -p.shank_length)),
        nominal_mass=float(sum(masses)),
        torso_height=p.torso_height,
    )
    validate_quadruped(model)
    return model


def validate_quadruped(model: RobotModel) -> None:
    if model.num_joints != 4:
        raise ModelError(f"quadruped requires exactly 4 actuated joints, got {model.num_joints}")
    if model.num_feet != 2:
        raise ModelError(f"quadruped requires exactly 2 feet, got {model.num_feet}")


def with_locked_dofs(model: RobotModel, locked: tuple[int, ...]) -> RobotModel:
    return replace(model, locked_dofs=tuple(sorted(set(locked))))


def _fmt(values) -> str:
    flat = np.ravel(np.asarray(values, dtype=float))
    return ", ".join(repr(float(v)) for v in flat)


def serialize_model(model: RobotModel) -> str:
    """Render a model as an INI ``[model]`` section that parses back exactly."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    section = {}
    for f in fields(RobotModel):
        value = getattr(model, f.name)
        if f.name == "link_names":
            section[f.name] = ", ".join(value)
        elif f.name in ("parents", "foot_links", "locked_dofs"):
            section[f.name] = ", ".join(str(int(v)) for v in value)
        else:
            section[f.name] = _fmt(value)
    cp["model"] = section
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_model(text: str) -> RobotModel:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    sec = cp["model"]

    def floats(key):
        raw = sec[key].strip()
        return tuple(float(v) for v in raw.split(",")) if raw else ()

    def ints(key):
        raw = sec.get(key, "").strip()
        return tuple(int(v) for v in raw.split(",")) if raw else ()

    def pairs(key):
        flat = floats(key)
        return tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))

    return RobotModel(
        link_names=tuple(s.strip() for s in sec["link_names"].split(",")),
        masses=floats("masses"),
        inertias=floats("inertias"),
        lengths=floats("lengths"),
        com_offsets=pairs("com_offsets"),
        parents=ints("parents"),
        joint_origins=pairs("joint_origins"),
        joint_lower=floats("joint_lower"),
        joint_upper=floats("joint_upper"),
        velocity_limits=floats("velocity_limits"),
        torque_limits=floats("torque_limits"),
        nominal_joint_positions=floats("nominal_joint_positions"),
        foot_links=ints("foot_links"),
        foot_offsets=pairs("foot_offsets"),
        nominal_mass=floats("nominal_mass")[0],
        torso_height=floats("torso_height")[0],
        locked_dofs=ints("locked_dofs"),
    )


def scale_torso_mass(model: RobotModel, scale: float) -> RobotModel:
    """Scale torso mass (and, at uniform density, its inertia)."""
    if scale == 1.0:
        return model
    if not scale > 0:
        raise ModelError(f"mass scale must be positive, got {scale}")
    masses = (model.masses[0] * scale,) + model.masses[1:]
    inertias = (model.inertias[0] * scale,) + model.inertias[1:]
    return replace(model, masses=masses, inertias=inertias, nominal_mass=float(sum(masses)))
