"""Multilayer perceptrons with hand-written backpropagation.

Parameters live in one flat float64 buffer; weights and biases are views into
it, laid out as ``W0, b0, W1, b1, ..., log_std``.  Gradients use the same
layout, which keeps the optimizer and gradient-norm clipping trivial.
Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("elu", "tanh", "linear")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """A forward cache was used after the parameters changed."""


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "elu":
        return np.where(z > 0, 1.0, h + 1.0)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


class PolicyParams:
    """MLP weights, biases and a per-output log standard deviation.

    ``log_std`` has the output size for policies and is empty for value
    networks (``with_log_std=False``).
    """

    def __init__(self, sizes, activation: str = "elu", with_log_std: bool = True,
                 data: np.ndarray | None = None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"need at least input and output sizes, got {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.sizes = sizes
        self.activation = activation
        self.num_std = sizes[-1] if with_log_std else 0
        n = self.count(sizes, self.num_std)
        if data is None:
            data = np.zeros(n)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (n,):
            raise ShapeError(f"parameter buffer must have {n} entries, got {data.shape}")
        self.data = data
        self.version = 0
        self.weights, self.biases, self.log_std = self._views(data)

    @staticmethod
    def count(sizes, num_std) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) + num_std

    def _views(self, buf):
        weights, biases = [], []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            weights.append(buf[off:off + a * b].reshape(a, b))
            off += a * b
            biases.append(buf[off:off + b])
            off += b
        return weights, biases, buf[off:off + self.num_std]

    def unflatten(self, flat: np.ndarray):
        """Views ``(weights, biases, log_std)`` into a buffer laid out like ``data``."""
        return self._views(flat)

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> PolicyParams:
        return PolicyParams(self.sizes, self.activation, self.num_std > 0, self.data.copy())

    def touch(self) -> None:
        """Mark the parameters as modified (invalidates forward caches)."""
        self.version += 1

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (self.sizes == other.sizes and self.activation == other.activation
                and self.num_std == other.num_std and np.array_equal(self.data, other.data))


def init_params(rng: np.random.Generator, sizes, activation: str = "elu", with_log_std: bool = True,
                init_std: float = 0.8, output_gain: float = 0.01) -> PolicyParams:
    """He-scaled normal hidden layers, a small output layer and zero biases."""
    p = PolicyParams(sizes, activation, with_log_std)
    for k, W in enumerate(p.weights):
        fan_in = W.shape[0]
        gain = output_gain if k == p.num_layers - 1 else math.sqrt(2.0)
        W[...] = rng.standard_normal(W.shape) * gain / math.sqrt(fan_in)
    p.log_std[...] = math.log(init_std)
    return p


@dataclass
class ForwardCache:
    params_id: int
    version: int
    inputs: list
    pre: list
    post: list


def mlp_forward(params: PolicyParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Affine layers with the hidden activation; the last layer is linear."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.sizes[0]:
        raise ShapeError(f"layer 0 expects {params.sizes[0]} inputs, got {x.shape[-1]}")
    inputs, pre, post = [], [], []
    h = x
    last = params.num_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ W + b
        h = z if k == last else _act(params.activation, z)
        pre.append(z)
        post.append(h)
    return h, ForwardCache(id(params), params.version, inputs, pre, post)


def mlp_backward(params: PolicyParams, cache: ForwardCache, grad_out) -> np.ndarray:
    """Gradient of ``sum(grad_out * output)`` w.r.t. every parameter (flat layout).

    The log-std slots are zero; distribution heads add their own terms.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("forward cache does not match the current parameters")
    grad = np.zeros_like(params.data)
    gW, gb, _ = params.unflatten(grad)
    g = np.asarray(grad_out, dtype=np.float64)
    last = params.num_layers - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * _act_grad(params.activation, cache.pre[k], cache.post[k])
        x = cache.inputs[k]
        gW[k][...] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb[k][...] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        if k:
            g = g @ params.weights[k].T
    return grad


# -- diagonal Gaussian head --------------------------------------------------

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(mean, log_std, actions) -> np.ndarray:
    z = (np.asarray(actions) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over a flat parameter buffer."""

    def __init__(self, size: int, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, data: np.ndarray, grad: np.ndarray) -> None:
        """In-place descent step on ``data``."""
        if self.lr == 0.0:
            return
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> float:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        grad *= max_norm / (norm + 1e-12)
    return norm


# -- checkpoint --------------------------------------------------------------

MAGIC = b"ERFI"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionMismatchError(CheckpointError):
    code = 12


class TruncatedCheckpointError(CheckpointError):
    code = 13


def checkpoint_bytes(params: PolicyParams) -> bytes:
    if params.activation != "elu" or params.num_std != params.sizes[-1]:
        raise CheckpointError("checkpoints hold ELU policies with a log-std per action")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(params.sizes))
    header += struct.pack(f"<{len(params.sizes)}I", *params.sizes)
    return header + params.data.astype("<f8").tobytes()


def save_checkpoint(params: PolicyParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(blob: bytes) -> PolicyParams:
    if len(blob) < 4:
        raise TruncatedCheckpointError("file ends inside the magic bytes")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise TruncatedCheckpointError("file ends inside the header")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {FORMAT_VERSION}")
    end = 12 + 4 * n_layers
    if len(blob) < end:
        raise TruncatedCheckpointError("file ends inside the layer table")
    sizes = struct.unpack_from(f"<{n_layers}I", blob, 12)
    n = PolicyParams.count(sizes, sizes[-1])
    if len(blob) < end + 8 * n:
        raise TruncatedCheckpointError(f"expected {n} parameters, file holds {(len(blob) - end) // 8}")
    if len(blob) > end + 8 * n:
        raise CheckpointError("trailing bytes after the parameter block")
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=end).astype(np.float64)
    return PolicyParams(sizes, "elu", True, data)


def load_checkpoint(path) -> PolicyParams:
    return parse_checkpoint(Path(path).read_bytes())
