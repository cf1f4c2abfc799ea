"""Run configuration: an INI file merged over defaults, then flag overrides.

Every key is declared in :data:`SCHEMA` with its type, default and an
optional range check.  Unknown sections or keys, unparsable values and
out-of-range values raise :class:`ConfigError` naming ``section.key`` and,
for values read from a file, the line number.
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

from erfi.actuation import ImpedanceGains, InjectionConfig, InjectionMode
from erfi.env import DomainRandomization, EpisodeConfig, RewardWeights
from erfi.harness import PayloadSpec, SweepParam, SweepSpec, default_grid
from erfi.model import ModelParams, RobotModel, build_model
from erfi.ppo import PpoConfig
from erfi.terrain import TerrainKind


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | bool | str | floats | ints | optfloat | enum
    default: Any
    check: Callable[[Any], bool] | None = None
    hint: str = ""
    choices: tuple[str, ...] = ()


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _enum(cls, default):
    return Key("enum", default, choices=tuple(m.value for m in cls))


_model_keys = {}
for _f in fields(ModelParams):
    _model_keys[_f.name] = Key("optfloat" if _f.default is None else "float", _f.default)

SCHEMA: dict[str, dict[str, Key]] = {
    "model": _model_keys,
    "env": {
        "max_duration": Key("float", 8.0, _pos, "> 0"),
        "policy_rate": Key("float", 50.0, _pos, "> 0"),
        "decimation": Key("int", 8, lambda x: x >= 1, ">= 1"),
        "terrain": _enum(TerrainKind, "FLAT"),
        "friction": Key("float", 0.5, _pos, "> 0"),
        "rough_amplitude": Key("float", 0.02, _nonneg, ">= 0"),
        "command_min": Key("float", -1.0, lambda x: abs(x) <= 1, "within [-1, 1]"),
        "command_max": Key("float", 1.0, lambda x: abs(x) <= 1, "within [-1, 1]"),
        "perceptive": Key("bool", False),
        "action_scale": Key("float", 0.5, _pos, "> 0"),
        "kp": Key("float", 80.0, _pos, "> 0"),
        "kd": Key("float", 2.0, _nonneg, ">= 0"),
        "gravity": Key("float", -9.81),
        "init_noise": Key("float", 0.0, _nonneg, ">= 0"),
        "w_velocity": Key("float", 1.0),
        "w_angular": Key("float", 0.5),
        "w_torque": Key("float", 2e-4),
        "w_action_rate": Key("float", 0.01),
        "w_orientation": Key("float", 0.5),
        "w_joint_acc": Key("float", 2.5e-7),
    },
    "injection": {
        "mode": _enum(InjectionMode, "NONE"),
        "tau_lim_r": Key("float", 4.0, _nonneg, ">= 0"),
        "tau_lim_o": Key("float", 4.0, _nonneg, ">= 0"),
        "f_lim_rb": Key("float", 0.0, _nonneg, ">= 0"),
        "tau_lim_rb": Key("float", 0.0, _nonneg, ">= 0"),
    },
    "dr": {
        "mass_scale_min": Key("float", 1.0, _pos, "> 0"),
        "mass_scale_max": Key("float", 1.0, _pos, "> 0"),
        "friction_min": Key("optfloat", None),
        "friction_max": Key("optfloat", None),
        "gain_scale_min": Key("float", 1.0, _pos, "> 0"),
        "gain_scale_max": Key("float", 1.0, _pos, "> 0"),
    },
    "trainer": {
        "num_envs": Key("int", 64, lambda x: x >= 1, ">= 1"),
        "iterations": Key("int", 1500, _nonneg, ">= 0"),
        "horizon": Key("int", 24, lambda x: x >= 1, ">= 1"),
        "epochs": Key("int", 5, lambda x: x >= 1, ">= 1"),
        "minibatches": Key("int", 4, lambda x: x >= 1, ">= 1"),
        "clip": Key("float", 0.2, _pos, "> 0"),
        "gamma": Key("float", 0.99, lambda x: 0 < x <= 1, "in (0, 1]"),
        "lam": Key("float", 0.95, lambda x: 0 <= x <= 1, "in [0, 1]"),
        "lr": Key("float", 3e-4, _nonneg, ">= 0"),
        "entropy_coef": Key("float", 0.001, _nonneg, ">= 0"),
        "value_coef": Key("float", 1.0, _nonneg, ">= 0"),
        "max_grad_norm": Key("float", 1.0, _nonneg, ">= 0"),
        "hidden": Key("ints", (128, 64), lambda x: len(x) >= 1 and min(x) >= 1, "positive sizes"),
        "init_std": Key("float", 0.8, _pos, "> 0"),
        "seed": Key("int", 0, _nonneg, ">= 0"),
    },
    "sweep": {
        "param": _enum(SweepParam, "BASE_MASS_SCALE"),
        "grid": Key("floats", (), lambda x: list(x) == sorted(x), "sorted ascending"),
        "trials": Key("int", 50, lambda x: x >= 1, ">= 1"),
        "terrain": _enum(TerrainKind, "FLAT"),
        "command": Key("float", 0.5, lambda x: abs(x) <= 1, "within [-1, 1]"),
        "budget": Key("float", 8.0, _pos, "> 0"),
        "threshold": Key("float", 2.5, _pos, "> 0"),
        "payload_mass": Key("float", 0.0, _nonneg, ">= 0"),
        "payload_x": Key("float", 0.05),
        "payload_z": Key("float", 0.12),
        "init_noise": Key("float", 0.05, _nonneg, ">= 0"),
        "seed": Key("int", 0, _nonneg, ">= 0"),
    },
    "step_response": {
        "kp": Key("float", 15.0, _pos, "> 0"),
        "kd": Key("float", 1.0, _nonneg, ">= 0"),
        "step": Key("float", 0.17),
        "mode": _enum(InjectionMode, "RFI"),
        "tau_lim_r": Key("float", 10.0, _nonneg, ">= 0"),
        "tau_lim_o": Key("float", 5.0, _nonneg, ">= 0"),
        "offset": Key("optfloat", None),
        "duration": Key("float", 1.0, _pos, "> 0"),
        "seeds": Key("int", 100, lambda x: x >= 1, ">= 1"),
    },
}


def _parse(key: Key, raw: str):
    raw = raw.strip()
    if key.kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if key.kind == "optfloat":
        return None if raw.lower() in ("", "none") else float(raw)
    if key.kind == "int":
        return int(raw)
    if key.kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if key.kind == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if key.kind == "ints":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if key.kind == "enum":
        v = raw.upper()
        if v not in key.choices:
            raise ValueError(f"expected one of {', '.join(key.choices)}")
        return v
    return raw


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """Fully resolved values plus where each came from (default, file, env or flag)."""

    values: dict[str, dict[str, Any]]
    provenance: dict[str, str] = field(default_factory=dict)

    def get(self, path: str):
        section, key = path.split(".", 1)
        return self.values[section][key]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_render(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def snapshot(self, run_dir) -> Path:
        """Write ``config_resolved.ini`` into ``run_dir``."""
        path = Path(run_dir) / "config_resolved.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8", newline="\n")
        return path

    # -- typed views -------------------------------------------------------
    def model(self) -> RobotModel:
        return build_model(dict(self["model"]))

    def env_config(self) -> EpisodeConfig:
        e, i, d = self["env"], self["injection"], self["dr"]
        fr = None
        if d["friction_min"] is not None or d["friction_max"] is not None:
            if d["friction_min"] is None or d["friction_max"] is None:
                raise ConfigError("dr.friction_min and dr.friction_max must be set together")
            fr = (d["friction_min"], d["friction_max"])
        if e["command_min"] > e["command_max"]:
            raise ConfigError("env.command_min exceeds env.command_max")
        try:
            return EpisodeConfig(
                max_duration=e["max_duration"], policy_rate=e["policy_rate"],
                decimation=e["decimation"],
                injection=InjectionConfig(i["mode"], i["tau_lim_r"], i["tau_lim_o"], i["f_lim_rb"],
                                          i["tau_lim_rb"]),
                dr=DomainRandomization((d["mass_scale_min"], d["mass_scale_max"]), fr,
                                       (d["gain_scale_min"], d["gain_scale_max"])),
                terrain=e["terrain"], friction=e["friction"], rough_amplitude=e["rough_amplitude"],
                command_range=(e["command_min"], e["command_max"]), perceptive=e["perceptive"],
                action_scale=e["action_scale"], gains=ImpedanceGains(e["kp"], e["kd"]),
                weights=RewardWeights(e["w_velocity"], e["w_angular"], e["w_torque"],
                                      e["w_action_rate"], e["w_orientation"], e["w_joint_acc"]),
                gravity=e["gravity"], init_noise=e["init_noise"], seed=self["trainer"]["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def ppo_config(self) -> PpoConfig:
        t = self["trainer"]
        return PpoConfig(horizon=t["horizon"], epochs=t["epochs"], minibatches=t["minibatches"],
                         clip=t["clip"], gamma=t["gamma"], lam=t["lam"], lr=t["lr"],
                         entropy_coef=t["entropy_coef"], value_coef=t["value_coef"],
                         max_grad_norm=t["max_grad_norm"], iterations=t["iterations"],
                         hidden=t["hidden"], init_std=t["init_std"])

    def sweep_spec(self, model: RobotModel | None = None) -> SweepSpec:
        s = self["sweep"]
        grid = s["grid"] or tuple(default_grid(SweepParam(s["param"]), model or self.model()))
        payload = PayloadSpec(s["payload_mass"], (s["payload_x"], s["payload_z"])) if s["payload_mass"] > 0 else None
        try:
            return SweepSpec(s["param"], grid, s["trials"], s["terrain"], s["command"], s["budget"],
                             s["threshold"], payload, s["init_noise"], s["seed"])
        except ValueError as exc:
            raise ConfigError(f"sweep: {exc}") from exc


def defaults() -> RunConfig:
    values = {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}
    prov = {f"{s}.{k}": "default" for s, keys in SCHEMA.items() for k in keys}
    return RunConfig(values, prov)


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    out = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), n)
    return out


def _set(cfg: RunConfig, section: str, key: str, raw: str, source: str, where: str = "") -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]{where}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key}{where}")
    spec = SCHEMA[section][key]
    try:
        value = _parse(spec, raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}{where}: cannot parse {raw!r} as {spec.kind} ({exc})") from None
    if spec.check is not None and value is not None and not spec.check(value):
        raise ConfigError(f"{section}.{key}{where}: {raw!r} out of range (expected {spec.hint})")
    cfg.values[section][key] = value
    cfg.provenance[f"{section}.{key}"] = source


def load_config(path=None, overrides: dict[str, str] | None = None,
                env_overrides: dict[str, str] | None = None) -> RunConfig:
    """Resolve defaults < file < environment variables < flags.

    ``overrides`` and ``env_overrides`` map ``section.key`` to raw strings.
    """
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        try:
            parser.read_string(text, source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
        lines = _line_numbers(text)
        for section in parser.sections():
            for key, raw in parser.items(section, raw=True):
                line = lines.get((section, key))
                where = f" ({p}:{line})" if line else f" ({p})"
                _set(cfg, section, key, raw, "file", where)
    for source, table in (("env", env_overrides or {}), ("flag", overrides or {})):
        for dotted, raw in table.items():
            if "." not in dotted:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            section, key = dotted.split(".", 1)
            _set(cfg, section, key, str(raw), source)
    return cfg
