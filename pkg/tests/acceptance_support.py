"""Cached smoke-training runs shared by the acceptance suite.

Policies are trained once per (strategy, seed) and stored under
``ERFI_ACCEPTANCE_CACHE`` (default ``.acceptance_cache`` in the repository).
Running this module directly fills the cache ahead of a test session.
"""
from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from erfi.actuation import InjectionConfig, InjectionMode
from erfi.env import EpisodeConfig
from erfi.model import build_model
from erfi.nn import PolicyParams, load_checkpoint, save_checkpoint
from erfi.ppo import PpoConfig, evaluate_speed, train

SMOKE_ENVS = 64
SMOKE_ITERATIONS = 1500
SEEDS = (0, 1, 2)
CACHE = Path(os.environ.get("ERFI_ACCEPTANCE_CACHE",
                            Path(__file__).resolve().parent.parent / ".acceptance_cache"))


@dataclass
class SmokeRun:
    strategy: InjectionMode
    seed: int
    policy: PolicyParams
    wall_time: float
    speed_at_half: float


def smoke_config(strategy: InjectionMode) -> EpisodeConfig:
    return EpisodeConfig(injection=InjectionConfig(InjectionMode(strategy)))


def smoke_run(strategy: InjectionMode | str, seed: int) -> SmokeRun:
    strategy = InjectionMode(strategy)
    stem = CACHE / f"{strategy.value}_seed{seed}_n{SMOKE_ENVS}_it{SMOKE_ITERATIONS}"
    ckpt, meta = stem.with_suffix(".ckpt"), stem.with_suffix(".json")
    if ckpt.exists() and meta.exists():
        info = json.loads(meta.read_text())
        return SmokeRun(strategy, seed, load_checkpoint(ckpt), info["wall_time"], info["speed_at_half"])
    model = build_model()
    cfg = smoke_config(strategy)
    t0 = time.perf_counter()
    result = train(model, cfg, PpoConfig(iterations=SMOKE_ITERATIONS), seed=seed, num_envs=SMOKE_ENVS)
    wall = time.perf_counter() - t0
    speed = evaluate_speed(model, result.policy, cfg, command=0.5)
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.policy, ckpt)
    meta.write_text(json.dumps({"wall_time": wall, "speed_at_half": speed}))
    return SmokeRun(strategy, seed, result.policy, wall, speed)


if __name__ == "__main__":
    strategies = sys.argv[1:] or ["RFI", "ERFI_50", "NONE"]
    for s in strategies:
        for seed in SEEDS:
            run = smoke_run(s, seed)
            print(f"{s} seed {seed}: {run.wall_time:.0f} s, speed {run.speed_at_half:.3f}", flush=True)
