"""Planar floating-base rigid-body dynamics.

All functions accept a single configuration ``q`` of shape ``(n,)`` or a batch
``(B, n)``; outputs carry the same leading batch axis.  Environments in a
batch never interact, so permuting the batch permutes the results.

The equations of motion are ``M(q) du/dt + h(q, u) = S^T tau + J^T lambda + f``
with penalty contact forces ``lambda``.  Time stepping is semi-implicit Euler
(velocities first, then positions) with the contact damping and friction
terms treated implicitly, followed by a momentum-consistent projection of the
base velocity for floating-base models.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from erfi import _kernels as K
from erfi.model import RobotModel

GRAVITY = -9.81


class SimulationError(FloatingPointError):
    """The integrator produced a non-finite state."""


@dataclass(frozen=True)
class GeneralizedState:
    """Coordinates ``q = (x, z, pitch, joints...)`` and velocities ``u``."""

    q: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if q.shape != u.shape:
            raise ValueError(f"q and u shapes differ: {q.shape} vs {u.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "u", u)

    def is_finite(self) -> np.ndarray:
        return np.isfinite(self.q).all(axis=-1) & np.isfinite(self.u).all(axis=-1)


@dataclass(frozen=True)
class ContactState:
    """Per-foot contact flag, (normal, tangential) force in N and depth in m."""

    in_contact: np.ndarray
    force: np.ndarray
    depth: np.ndarray
    world_force: np.ndarray = field(repr=False)

    @property
    def normal(self) -> np.ndarray:
        return self.force[..., 0]

    @property
    def tangential(self) -> np.ndarray:
        return self.force[..., 1]


@dataclass(frozen=True)
class ExternalWrench:
    """Force (x, z) in N and pitch torque in N m applied at the torso CoM.

    Active on ``start <= t < start + duration``.  Fields may carry a leading
    batch axis.
    """

    force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    torque: np.ndarray | float = 0.0
    start: float = 0.0
    duration: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.duration) < 0):
            raise ValueError("wrench duration must be non-negative")

    def at(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        active = (t >= self.start) & (t < np.asarray(self.start) + self.duration)
        force = np.asarray(self.force, dtype=float)
        torque = np.asarray(self.torque, dtype=float)
        return force * active[..., None], torque * active


NO_WRENCH = ExternalWrench()


@dataclass(frozen=True)
class ContactParams:
    stiffness: float = 40000.0
    damping: float = 400.0
    tangential_damping: float = 2000.0


@dataclass
class Kinematics:
    """World-frame link angles, link origins, link CoMs and foot points."""

    angles: np.ndarray  # (B, L) absolute pitch of every link
    origins: np.ndarray  # (B, L, 2); origin of link 0 is the base point
    coms: np.ndarray  # (B, L, 2)
    feet: np.ndarray  # (B, F, 2)

    @property
    def base(self) -> np.ndarray:
        return self.origins[..., 0, :]

    @property
    def torso_frame(self) -> np.ndarray:
        """``(x, z, pitch)`` of the torso frame."""
        return np.concatenate([self.base, self.angles[..., :1]], axis=-1)


@dataclass(frozen=True)
class _ModelArrays:
    parents: np.ndarray
    jorig: np.ndarray
    com: np.ndarray
    mass: np.ndarray
    inertia: np.ndarray
    anc: np.ndarray
    foot_link: np.ndarray
    foot_off: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    free: np.ndarray


@lru_cache(maxsize=256)
def _arrays(model: RobotModel) -> _ModelArrays:
    L = model.num_links
    anc = np.zeros((L, L), dtype=np.bool_)
    for k in range(L):
        for l in model.chain(k):
            anc[k, l] = True
    jorig = np.zeros((L, 2))
    jorig[1:] = np.asarray(model.joint_origins, dtype=float).reshape(L - 1, 2)
    free = np.array([i for i in range(model.num_dofs) if i not in model.locked_dofs], dtype=np.int64)
    return _ModelArrays(
        parents=np.asarray(model.parents, dtype=np.int64),
        jorig=jorig,
        com=np.asarray(model.com_offsets, dtype=float).reshape(L, 2),
        mass=np.asarray(model.masses, dtype=float),
        inertia=np.asarray(model.inertias, dtype=float),
        anc=anc,
        foot_link=np.asarray(model.foot_links, dtype=np.int64),
        foot_off=np.asarray(model.foot_offsets, dtype=float).reshape(-1, 2),
        lower=np.asarray(model.joint_lower, dtype=float),
        upper=np.asarray(model.joint_upper, dtype=float),
        free=free,
    )


_INERTIAL_FIELDS = ("masses", "inertias", "com_offsets", "nominal_mass")


class ModelBatch:
    """Per-environment models that share topology, geometry and limits.

    Only the inertial data (link masses, inertias, CoM offsets) may differ,
    which is what domain randomization and payload attachment change.
    """

    def __init__(self, models):
        models = tuple(models)
        if not models:
            raise ValueError("ModelBatch needs at least one model")
        ref = models[0]
        for m in models[1:]:
            for f in fields(RobotModel):
                if f.name not in _INERTIAL_FIELDS and getattr(m, f.name) != getattr(ref, f.name):
                    raise ValueError(f"models in a batch must agree on {f.name}")
        self.models = models
        self.reference = ref
        self.masses = np.array([m.masses for m in models], dtype=float)
        self.inertias = np.array([m.inertias for m in models], dtype=float)
        self.coms = np.array([m.com_offsets for m in models], dtype=float).reshape(len(models), -1, 2)

    def __len__(self) -> int:
        return len(self.models)

    def set(self, index: int, model: RobotModel) -> None:
        """Replace the model of one environment."""
        ref = self.reference
        for f in fields(RobotModel):
            if f.name not in _INERTIAL_FIELDS and getattr(model, f.name) != getattr(ref, f.name):
                raise ValueError(f"models in a batch must agree on {f.name}")
        models = list(self.models)
        models[index] = model
        self.models = tuple(models)
        self.masses[index] = model.masses
        self.inertias[index] = model.inertias
        self.coms[index] = model.com_offsets

    def inertial(self, B: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if len(self.models) != B:
            raise ValueError(f"model batch holds {len(self.models)} models, state batch has {B}")
        return self.coms, self.masses, self.inertias


def _inertial(model, B: int):
    if isinstance(model, ModelBatch):
        return model.inertial(B)
    return _shared_inertial(model, B)


@lru_cache(maxsize=64)
def _shared_inertial(model: RobotModel, B: int):
    a = _arrays(model)
    rep = lambda x: np.ascontiguousarray(np.broadcast_to(x, (B,) + x.shape))
    return rep(a.com), rep(a.mass), rep(a.inertia)


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (np.ascontiguousarray(x[None]), True) if x.ndim == 1 else (np.ascontiguousarray(x), False)


def _unbatch(x, single):
    return x[0] if single else x


def forward_kinematics(model: RobotModel, q) -> Kinematics:
    qb, single = _batch(q)
    a = _arrays(model)
    angles, origins, coms, feet = K.kinematics_batch(qb, a.parents, a.jorig, a.com, a.foot_link, a.foot_off)
    return Kinematics(*(_unbatch(v, single) for v in (angles, origins, coms, feet)))


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    """Joint-space inertia matrix ``M(q)``; symmetric positive definite."""
    qb, single = _batch(q)
    a = _arrays(model)
    M = K.mass_matrix_batch(qb, a.parents, a.jorig, a.com, a.mass, a.inertia, a.anc, a.foot_link, a.foot_off)
    return _unbatch(M, single)


def bias_forces(model: RobotModel, q, u, gravity: float = GRAVITY) -> np.ndarray:
    """Coriolis, centrifugal and gravity terms ``h(q, u)``."""
    qb, single = _batch(q)
    ub, _ = _batch(u)
    a = _arrays(model)
    h = K.bias_batch(qb, ub, float(gravity), a.parents, a.jorig, a.com, a.mass, a.inertia, a.anc,
                     a.foot_link, a.foot_off)
    return _unbatch(h, single)


def contact_jacobian(model: RobotModel, q) -> np.ndarray:
    """Stacked foot Jacobian ``(2F, n)``: rows (x, z) of foot 0, then foot 1, ..."""
    qb, single = _batch(q)
    a = _arrays(model)
    J = K.foot_jac_batch(qb, a.parents, a.jorig, a.com, a.anc, a.foot_link, a.foot_off)
    J = J.reshape(J.shape[0], -1, J.shape[-1])
    return _unbatch(J, single)


def _friction(terrain, friction, shape) -> np.ndarray:
    """Per-foot friction coefficients of shape ``(B, F)``.

    A 1-D terrain friction is per environment; an explicit ``friction`` is a
    scalar, per-foot ``(F,)`` or full ``(B, F)`` array.
    """
    if friction is None:
        mu = np.asarray(terrain.friction, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
    else:
        mu = np.asarray(friction, dtype=float)
    return np.ascontiguousarray(np.broadcast_to(mu, shape))


def _tangent(normal: np.ndarray) -> np.ndarray:
    return np.stack([normal[..., 1], -normal[..., 0]], axis=-1)


def contact_forces(model: RobotModel, q, u, terrain, params: ContactParams = ContactParams(),
                   friction=None) -> ContactState:
    """Explicit penalty forces at the current foot velocities.

    Normal force ``k_n d + d_n dd/dt`` clamped at zero; tangential force
    ``-k_t v_t`` clamped to the Coulomb cone ``|f_t| <= mu f_n``.
    """
    qb, single = _batch(q)
    ub, _ = _batch(u)
    a = _arrays(model)
    _, _, _, feet = K.kinematics_batch(qb, a.parents, a.jorig, a.com, a.foot_link, a.foot_off)
    J = K.foot_jac_batch(qb, a.parents, a.jorig, a.com, a.anc, a.foot_link, a.foot_off)
    v = np.einsum("bfin,bn->bfi", J, ub)
    depth, normal = terrain.contact_geometry(feet[..., 0], feet[..., 1])
    tangent = _tangent(normal)
    vn = np.einsum("bfi,bfi->bf", v, normal)
    vt = np.einsum("bfi,bfi->bf", v, tangent)
    mu = _friction(terrain, friction, depth.shape)
    active = depth > 0
    fn = np.where(active, np.maximum(params.stiffness * depth - params.damping * vn, 0.0), 0.0)
    ft = np.where(active, np.clip(-params.tangential_damping * vt, -mu * fn, mu * fn), 0.0)
    world = fn[..., None] * normal + ft[..., None] * tangent
    return ContactState(*(_unbatch(x, single) for x in (fn > 0, np.stack([fn, ft], -1), depth, world)))


def advance(
    model: RobotModel | ModelBatch,
    state: GeneralizedState,
    tau,
    wrench: ExternalWrench | None,
    terrain,
    dt: float,
    *,
    gravity: float = GRAVITY,
    contact: ContactParams = ContactParams(),
    friction=None,
    check_finite: bool = True,
) -> tuple[GeneralizedState, ContactState]:
    """One integration step; returns the new state and the contact forces applied.

    The new velocity solves ``M (u' - u) = dt (S^T tau - h + J^T lambda + f)``
    where the contact damping and viscous friction are evaluated at ``u'`` and
    the active set (separated / sticking / sliding per foot) is iterated to
    consistency.  Positions then advance with ``u'``; joints are clamped to
    their limits with the offending velocity zeroed.  For floating-base models
    the base velocity is finally corrected so that linear momentum and
    angular momentum about the CoM change exactly by the external impulse.

    ``model`` may be a :class:`ModelBatch` holding one model per environment.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    q, single = _batch(state.q)
    u, _ = _batch(state.u)
    B = q.shape[0]
    coms, masses, inertias = _inertial(model, B)
    if isinstance(model, ModelBatch):
        model = model.reference
    a = _arrays(model)
    tau = np.ascontiguousarray(np.broadcast_to(np.asarray(tau, dtype=float), (B, model.num_joints)))
    w_force, w_torque = (wrench or NO_WRENCH).at(state.t)
    w_force = np.ascontiguousarray(np.broadcast_to(w_force, (B, 2)), dtype=float)
    w_torque = np.ascontiguousarray(np.broadcast_to(w_torque, (B,)), dtype=float)

    _, _, _, feet = K.kinematics_batch(q, a.parents, a.jorig, a.com, a.foot_link, a.foot_off)
    depth, normal = terrain.contact_geometry(feet[..., 0], feet[..., 1])
    depth = np.ascontiguousarray(depth, dtype=float)
    normal = np.ascontiguousarray(normal, dtype=float)
    mu = _friction(terrain, friction, depth.shape)

    q1, u1, force, world, _ = K.step_batch(
        q, u, tau, w_force, w_torque, depth, normal, mu, float(dt), float(gravity),
        contact.stiffness, contact.damping, contact.tangential_damping,
        a.parents, a.jorig, coms, masses, inertias, a.anc, a.foot_link, a.foot_off,
        a.lower, a.upper, a.free, not model.locked_dofs)

    if check_finite:
        ok = np.isfinite(q1).all(1) & np.isfinite(u1).all(1)
        if not ok.all():
            bad = np.flatnonzero(~ok)
            raise SimulationError(
                f"non-finite state in environment(s) {bad.tolist()} at t={np.max(state.t):.4f}s; "
                f"last finite q={q[bad[0]].tolist()}, u={u[bad[0]].tolist()}")
    new = GeneralizedState(_unbatch(q1, single), _unbatch(u1, single), state.t + dt)
    in_contact = force[..., 0] > 0
    cs = ContactState(*(_unbatch(x, single) for x in (in_contact, force, depth, world)))
    return new, cs


def step_dynamics(model: RobotModel, state: GeneralizedState, tau, wrench: ExternalWrench | None,
                  terrain, dt: float, **kwargs) -> GeneralizedState:
    """Advance ``state`` by ``dt``; see :func:`advance` for keyword options."""
    return advance(model, state, tau, wrench, terrain, dt, **kwargs)[0]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 1] * b[..., 0] - a[..., 0] * b[..., 1]


def center_of_mass(model: RobotModel, q) -> np.ndarray:
    kin = forward_kinematics(model, q)
    m = np.asarray(model.masses)
    return np.einsum("l,...li->...i", m, kin.coms) / m.sum()


def linear_momentum(model: RobotModel, q, u) -> np.ndarray:
    M = mass_matrix(model, q)
    return np.einsum("...nm,...m->...n", M, np.asarray(u, dtype=float))[..., :2]


def angular_momentum(model: RobotModel, q, u) -> np.ndarray:
    """Angular momentum about the whole-body CoM (pitch axis)."""
    M = mass_matrix(model, q)
    Mu = np.einsum("...nm,...m->...n", M, np.asarray(u, dtype=float))
    base = np.asarray(q, dtype=float)[..., :2]
    return Mu[..., 2] - _cross(center_of_mass(model, q) - base, Mu[..., :2])


def total_energy(model: RobotModel, state: GeneralizedState, gravity: float = GRAVITY,
                 datum: float = 0.0):
    """Kinetic energy ``u^T M u / 2`` plus gravitational potential above ``datum``."""
    M = mass_matrix(model, state.q)
    ke = 0.5 * np.einsum("...n,...nm,...m->...", state.u, M, state.u)
    coms_z = forward_kinematics(model, state.q).coms[..., 1]
    pe = -gravity * np.einsum("l,...l->...", np.asarray(model.masses), coms_z - datum)
    e = ke + pe
    return float(e) if np.ndim(e) == 0 else e
