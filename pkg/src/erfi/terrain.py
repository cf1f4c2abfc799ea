"""One-dimensional terrain profiles (flat ground, ascending stairs, rough ground).

Every profile answers pure height queries ``height(x)`` and the penetration
geometry needed by the penalty contact model.  Batches of per-environment
profiles share one vectorised representation (:class:`TerrainBatch`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

STEP_HEIGHT_RANGE = (0.05, 0.2)
STEP_DEPTH_RANGE = (0.25, 0.4)
ROUGH_X0 = -2.0
ROUGH_DX = 0.02
ROUGH_SAMPLES = 851  # covers x in [-2, 15]
ROUGH_RAMP = (0.3, 0.8)


class TerrainKind(str, Enum):
    FLAT = "FLAT"
    STAIRS = "STAIRS"
    ROUGH = "ROUGH"


class TerrainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TerrainProfile:
    kind: TerrainKind = TerrainKind.FLAT
    friction: float = 0.5
    step_height: float = 0.0
    step_depth: float = 0.3
    start_x: float = 1.0
    num_steps: int = 12
    amplitude: float = 0.0
    correlation_length: float = 0.1
    samples: np.ndarray | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TerrainProfile):
            return NotImplemented
        same = (self.kind, self.friction, self.step_height, self.step_depth, self.start_x,
                self.num_steps, self.amplitude, self.correlation_length) == (
            other.kind, other.friction, other.step_height, other.step_depth, other.start_x,
            other.num_steps, other.amplitude, other.correlation_length)
        if not same:
            return False
        if self.samples is None or other.samples is None:
            return self.samples is other.samples
        return np.array_equal(self.samples, other.samples)

    @cached_property
    def _batch(self) -> TerrainBatch:
        return TerrainBatch.stack([self])

    def height(self, x):
        x = np.asarray(x, dtype=float)
        return self._batch.height(x.reshape(1, -1)).reshape(x.shape)

    def contact_geometry(self, x, z):
        return self._batch.contact_geometry(x, z)

    def with_friction(self, mu: float) -> TerrainProfile:
        from dataclasses import replace

        return replace(self, friction=float(mu))


def generate_terrain(
    rng: np.random.Generator,
    kind: TerrainKind | str,
    *,
    step_height: float | tuple[float, float] | None = None,
    step_depth: float | tuple[float, float] | None = None,
    start_x: float = 1.0,
    num_steps: int = 12,
    amplitude: float = 0.02,
    correlation_length: float = 0.1,
    friction: float = 0.5,
) -> TerrainProfile:
    """Sample a terrain profile.

    Stair dimensions given as ``(low, high)`` tuples are drawn uniformly;
    scalars are used as-is.  Stairs start at ``start_x`` so that a 2.5 m walk
    from the spawn point always crosses at least one riser.
    """
    kind = TerrainKind(kind)
    if not friction > 0:
        raise TerrainError(f"friction must be positive, got {friction}")
    if kind is TerrainKind.FLAT:
        return TerrainProfile(kind=kind, friction=friction)
    if kind is TerrainKind.STAIRS:
        h = _draw(rng, STEP_HEIGHT_RANGE if step_height is None else step_height)
        d = _draw(rng, STEP_DEPTH_RANGE if step_depth is None else step_depth)
        if not STEP_HEIGHT_RANGE[0] <= h <= STEP_HEIGHT_RANGE[1]:
            raise TerrainError(f"step height {h} outside {STEP_HEIGHT_RANGE}")
        if not STEP_DEPTH_RANGE[0] <= d <= STEP_DEPTH_RANGE[1]:
            raise TerrainError(f"step depth {d} outside {STEP_DEPTH_RANGE}")
        if not 0 <= start_x < 2.5 or num_steps < 1:
            raise TerrainError("stairs must start within 2.5 m of the spawn point")
        return TerrainProfile(kind=kind, friction=friction, step_height=h, step_depth=d,
                              start_x=float(start_x), num_steps=int(num_steps))
    if amplitude < 0 or correlation_length <= 0:
        raise TerrainError("rough terrain needs amplitude >= 0 and correlation_length > 0")
    noise = rng.standard_normal(ROUGH_SAMPLES)
    sigma = correlation_length / ROUGH_DX
    radius = int(np.ceil(3 * sigma))
    kernel = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    smooth = np.convolve(noise, kernel / kernel.sum(), mode="same")
    std = smooth.std()
    smooth = smooth * (amplitude / std if std > 0 else 0.0)
    xs = ROUGH_X0 + ROUGH_DX * np.arange(ROUGH_SAMPLES)
    ramp = np.clip((xs - ROUGH_RAMP[0]) / (ROUGH_RAMP[1] - ROUGH_RAMP[0]), 0.0, 1.0)
    samples = smooth * ramp
    samples.setflags(write=False)
    return TerrainProfile(kind=kind, friction=friction, amplitude=float(amplitude),
                          correlation_length=float(correlation_length), samples=samples)


def _draw(rng, spec) -> float:
    if isinstance(spec, tuple):
        return float(rng.uniform(spec[0], spec[1]))
    return float(spec)


class TerrainBatch:
    """Per-environment terrains evaluated together.

    ``height`` and ``contact_geometry`` take arrays whose leading axis is the
    environment (length ``len(batch)`` or 1 for broadcasting).
    """

    def __init__(self, kind: TerrainKind, friction, step_height, step_depth, start_x, num_steps,
                 samples):
        self.kind = kind
        self.friction = friction
        self.step_height = step_height
        self.step_depth = step_depth
        self.start_x = start_x
        self.num_steps = num_steps
        self.samples = samples

    @classmethod
    def stack(cls, profiles: list[TerrainProfile]) -> TerrainBatch:
        kinds = {p.kind for p in profiles}
        if len(kinds) != 1:
            raise TerrainError(f"cannot batch mixed terrain kinds {sorted(k.value for k in kinds)}")
        kind = kinds.pop()
        col = lambda name: np.array([getattr(p, name) for p in profiles], dtype=float)[:, None]
        samples = None
        if kind is TerrainKind.ROUGH:
            samples = np.stack([p.samples for p in profiles])
        return cls(kind, col("friction")[:, 0], col("step_height"), col("step_depth"),
                   col("start_x"), col("num_steps"), samples)

    def __len__(self) -> int:
        return len(self.friction)

    def take(self, index) -> TerrainBatch:
        index = np.atleast_1d(index)
        return TerrainBatch(self.kind, self.friction[index], self.step_height[index],
                            self.step_depth[index], self.start_x[index], self.num_steps[index],
                            None if self.samples is None else self.samples[index])

    def assign(self, index: int, profile: TerrainProfile) -> None:
        """Overwrite row ``index`` with ``profile`` (same kind)."""
        if profile.kind is not self.kind:
            raise TerrainError(f"cannot place {profile.kind.value} terrain in a {self.kind.value} batch")
        self.friction[index] = profile.friction
        self.step_height[index] = profile.step_height
        self.step_depth[index] = profile.step_depth
        self.start_x[index] = profile.start_x
        self.num_steps[index] = profile.num_steps
        if self.samples is not None:
            self.samples[index] = profile.samples

    def height(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind is TerrainKind.FLAT:
            return np.zeros_like(x)
        if self.kind is TerrainKind.STAIRS:
            shape = (-1,) + (1,) * (x.ndim - 1)
            start = self.start_x.reshape(shape)
            depth = self.step_depth.reshape(shape)
            n = self.num_steps.reshape(shape)
            idx = np.floor((x - start) / depth) + 1.0
            return self.step_height.reshape(shape) * np.clip(idx, 0.0, n)
        flat_x = x.reshape(x.shape[0], -1)
        s = (flat_x - ROUGH_X0) / ROUGH_DX
        i = np.clip(np.floor(s).astype(int), 0, ROUGH_SAMPLES - 2)
        w = np.clip(s - i, 0.0, 1.0)
        samples = self.samples
        if samples.shape[0] == 1 and flat_x.shape[0] != 1:
            samples = np.broadcast_to(samples, (flat_x.shape[0], samples.shape[1]))
        lo = np.take_along_axis(samples, i, axis=1)
        hi = np.take_along_axis(samples, i + 1, axis=1)
        return ((1.0 - w) * lo + w * hi).reshape(x.shape)

    def contact_geometry(self, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Penetration depth (>= 0) and outward unit normal at points ``(x, z)``.

        The surface normal is vertical except against stair risers, where a
        point that entered the riser sideways is pushed back horizontally.
        """
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        h = self.height(x)
        depth = np.maximum(h - z, 0.0)
        normal = np.zeros(x.shape + (2,))
        normal[..., 1] = 1.0
        if self.kind is TerrainKind.STAIRS:
            shape = (-1,) + (1,) * (x.ndim - 1)
            start = self.start_x.reshape(shape)
            step_d = self.step_depth.reshape(shape)
            step_h = self.step_height.reshape(shape)
            n = self.num_steps.reshape(shape)
            k = np.floor((x - start) / step_d)
            riser_x = start + k * step_d
            lower = step_h * k
            horizontal = x - riser_x
            through_riser = (depth > 0) & (k >= 0) & (k < n) & (z >= lower) & (horizontal < depth)
            depth = np.where(through_riser, horizontal, depth)
            normal[..., 0] = np.where(through_riser, -1.0, 0.0)
            normal[..., 1] = np.where(through_riser, 0.0, 1.0)
        return depth, normal
