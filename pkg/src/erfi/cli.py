"""``erfi`` command-line entry point.

Global flags come before the subcommand::

    erfi [--config FILE] [--set section.key=value ...] [--seed N] [--threads N]
         [--run-dir DIR] <train|evaluate|sweep|step-response|plot|validate> ...

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 validation-suite failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3
ENV_SEED, ENV_THREADS = "ERFI_SEED", "ERFI_THREADS"

log = logging.getLogger("erfi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_globals(p: argparse.ArgumentParser, prefix: str = "") -> None:
    """Global flags; subparsers register them too (with suppressed defaults)."""
    sub = bool(prefix)
    kw = {"default": argparse.SUPPRESS} if sub else {}
    p.add_argument("--config", dest=prefix + "config", type=Path, **kw,
                   help="INI file merged over the defaults")
    p.add_argument("--set", dest=prefix + "overrides", action="append",
                   default=argparse.SUPPRESS if sub else [], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable; wins over file and environment)")
    p.add_argument("--seed", dest=prefix + "seed", type=int, **kw,
                   help=f"seed for training and sweeps (env {ENV_SEED})")
    p.add_argument("--threads", dest=prefix + "threads", type=int, **kw,
                   help=f"sweep worker processes (env {ENV_THREADS})")
    p.add_argument("--run-dir", dest=prefix + "run_dir", type=Path,
                   **(kw if sub else {"default": Path("runs")}), help="output directory")
    p.add_argument("-v", "--verbose", dest=prefix + "verbose", action="store_true", **kw)


GLOBAL_DESTS = ("config", "seed", "threads", "run_dir", "verbose")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="erfi", description="Planar quadruped injection-robustness lab.")
    _add_globals(p)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy; writes checkpoint and learning curve")
    t.add_argument("--strategy", help="injection mode (NONE, RFI, RAO, ERFI_C, ERFI_50)")
    t.add_argument("--iterations", type=int)

    e = sub.add_parser("evaluate", help="trial report for one checkpoint at one parameter value")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--value", type=float, help="swept-parameter value (default: nominal)")
    e.add_argument("--dump-trajectory", action="store_true",
                   help="also write the first trial's state, torque and reward trace")

    s = sub.add_parser("sweep", help="success-rate curves of one or more checkpoints")
    s.add_argument("policies", nargs="+", metavar="[ID=]CHECKPOINT")

    r = sub.add_parser("step-response", help="single-joint step response under injection")
    r.add_argument("--mode", help="injection mode for the step response")

    pl = sub.add_parser("plot", help="regenerate SVGs from CSVs written by this tool")
    pl.add_argument("csv", nargs="+", type=Path)

    v = sub.add_parser("validate", help="dynamics and gradient invariant suite")
    v.add_argument("--fast", action="store_true", help="shorter energy-drift run")
    for child in (t, e, s, r, pl, v):
        _add_globals(child, "sub_")
    return p


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    for name in GLOBAL_DESTS:
        if hasattr(args, "sub_" + name):
            setattr(args, name, getattr(args, "sub_" + name))
    args.overrides = list(args.overrides) + list(getattr(args, "sub_overrides", []))
    return args


def _overrides(args) -> tuple[dict[str, str], dict[str, str]]:
    from erfi.config import ConfigError

    flags, env = {}, {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    if os.environ.get(ENV_SEED):
        env["trainer.seed"] = env["sweep.seed"] = os.environ[ENV_SEED]
    if args.seed is not None:
        flags["trainer.seed"] = flags["sweep.seed"] = str(args.seed)
    if args.command == "train":
        if args.strategy:
            flags["injection.mode"] = args.strategy
        if args.iterations is not None:
            flags["trainer.iterations"] = str(args.iterations)
    if args.command == "step-response" and args.mode:
        flags["step_response.mode"] = args.mode
    return flags, env


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get(ENV_THREADS)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be at least 1, got {n}")
    return n


# -- subcommands -------------------------------------------------------------

def cmd_train(cfg, args) -> int:
    from erfi import io
    from erfi.nn import save_checkpoint
    from erfi.ppo import train

    model, env_cfg, ppo = cfg.model(), cfg.env_config(), cfg.ppo_config()
    out = io.OutputSet(args.run_dir, "train", env_cfg.injection.mode.value, cfg.to_ini())

    def progress(rec, stats):
        if rec.iteration % 50 == 0:
            log.info("iter %d reward %.3f speed %.3f", rec.iteration, rec.mean_reward, rec.mean_speed)

    result = train(model, env_cfg, ppo, cfg.get("trainer.seed"), cfg.get("trainer.num_envs"),
                   callback=progress)
    save_checkpoint(result.policy, out.path(".ckpt"))
    io.write_csv(out.path(".csv"), io.TRAINING_COLUMNS, io.training_rows(result.curve))
    io.plot_training_curve(result.curve, out.path(".svg"))
    _report(out)
    return EXIT_OK


def _load_policy(path: Path, obs_size: int):
    from erfi.nn import load_checkpoint

    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    policy = load_checkpoint(path)
    if policy.sizes[0] != obs_size:
        raise ValueError(f"{path}: policy expects {policy.sizes[0]} observations, "
                         f"the configured environment provides {obs_size}")
    return policy


def cmd_evaluate(cfg, args) -> int:
    from dataclasses import replace

    from erfi import io
    from erfi.harness import (TRAJECTORY_COLUMNS, aggregate, apply_perturbation, nominal_value,
                              record_trajectory, run_trials)

    model, env_cfg = cfg.model(), cfg.env_config()
    spec = cfg.sweep_spec(model)
    policy = _load_policy(args.checkpoint, env_cfg.obs_size)
    value = nominal_value(spec.param, env_cfg) if args.value is None else args.value
    spec = replace(spec, grid=(value,))
    apply_perturbation(spec.param, value, model, env_cfg)  # validates the value
    out = io.OutputSet(args.run_dir, "evaluate", spec.param.value, cfg.to_ini())
    pid = args.checkpoint.stem
    results = run_trials(policy, pid, model, env_cfg, spec, value)
    io.write_csv(out.path(".csv"), io.TRIAL_COLUMNS, io.trial_rows(results))
    if args.dump_trajectory:
        rows = record_trajectory(policy, model, env_cfg, spec, value, spec.trial_seeds[0])
        io.write_csv(out.path("_trajectory.csv"), TRAJECTORY_COLUMNS, rows)
    curve = aggregate(results)[pid]
    counts = {o: sum(r.outcome == o for r in results) for o in {r.outcome for r in results}}
    print(f"policy {pid} at {spec.param.value}={value:g}: success {curve.successes[0]}/"
          f"{curve.trials[0]} = {curve.rates[0]:.3f} +- {curve.ci_halfwidth[0]:.3f}")
    print("outcomes: " + ", ".join(f"{o.value} {n}" for o, n in sorted(counts.items())))
    print(f"mean speed {sum(r.mean_speed for r in results) / len(results):.3f} m/s")
    _report(out)
    return EXIT_OK


def _policy_ids(items) -> dict[str, Path]:
    out = {}
    for item in items:
        pid, _, path = item.partition("=") if "=" in item else ("", "", item)
        path = Path(path)
        pid = pid or path.stem
        if pid in out:
            raise UsageError(f"duplicate policy id {pid!r}")
        out[pid] = path
    return out


def cmd_sweep(cfg, args) -> int:
    from erfi import io
    from erfi.harness import run_sweep

    model, env_cfg = cfg.model(), cfg.env_config()
    spec = cfg.sweep_spec(model)
    policies = {pid: _load_policy(p, env_cfg.obs_size) for pid, p in _policy_ids(args.policies).items()}
    out = io.OutputSet(args.run_dir, "sweep", spec.param.value, cfg.to_ini())
    results, curves = run_sweep(policies, spec, model, env_cfg, workers=_threads(args))
    io.write_csv(out.path(".csv"), io.TRIAL_COLUMNS, io.trial_rows(results))
    io.write_csv(out.path("_curves.csv"), io.CURVE_COLUMNS, io.curve_rows(curves.values()))
    io.plot_success_curves(list(curves.values()), out.path(".svg"))
    for c in curves.values():
        print(f"{c.policy_id}: " + " ".join(f"{v:g}:{r:.2f}" for v, r in zip(c.values, c.rates)))
    _report(out)
    return EXIT_OK


def cmd_step_response(cfg, args) -> int:
    from erfi import io
    from erfi.actuation import ImpedanceGains, InjectionConfig, run_step_response

    s = cfg["step_response"]
    injection = InjectionConfig(s["mode"], s["tau_lim_r"], s["tau_lim_o"])
    seed0 = cfg.get("sweep.seed")
    resp = run_step_response(ImpedanceGains(s["kp"], s["kd"]), s["step"], injection, s["duration"],
                             range(seed0, seed0 + s["seeds"]), offset=s["offset"])
    out = io.OutputSet(args.run_dir, "step-response", injection.mode.value, cfg.to_ini())
    io.write_csv(out.path(".csv"), io.STEP_COLUMNS, io.step_rows(resp))
    io.write_csv(out.path("_summary.csv"), io.STEP_SUMMARY_COLUMNS, io.step_summary_rows(resp))
    io.plot_step_response(resp, out.path(".svg"))
    for k, v in resp.summary().items():
        print(f"{k} {v:.6g}")
    _report(out)
    return EXIT_OK


def cmd_plot(cfg, args) -> int:
    import csv

    from erfi import io

    for path in args.csv:
        if not path.exists():
            raise FileNotFoundError(f"no such CSV: {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            header = tuple(next(csv.reader(fh), ()))
        if header == io.TRIAL_COLUMNS:
            curves = list(io.aggregate(io.read_trials(path)).values())
        elif header == io.CURVE_COLUMNS:
            curves = list(io.read_curves(path).values())
        elif header in (io.TRAINING_COLUMNS, io.STEP_COLUMNS):
            curves = None
        else:
            raise ValueError(f"{path}: unrecognized CSV header {list(header)}")
        if curves:
            param = curves[0].param
        else:
            param = "training" if header == io.TRAINING_COLUMNS else "step"
        out = io.OutputSet(args.run_dir, "plot", param, cfg.to_ini())
        svg = out.path(".svg")
        if header == io.TRAINING_COLUMNS:
            io.plot_training_curve(io.read_training_curve(path), svg)
        elif header == io.STEP_COLUMNS:
            io.plot_step_response(io.read_step_response(path), svg)
        else:
            io.plot_success_curves(curves, svg)
        _report(out)
    return EXIT_OK


def cmd_validate(cfg, args) -> int:
    from erfi.validation import run_all

    checks = run_all(fast=args.fast)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VALIDATION if failed else EXIT_OK


def _report(out) -> None:
    for p in out.paths:
        print(f"wrote {p}")


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "step-response": cmd_step_response,
    "plot": cmd_plot,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    from erfi.config import ConfigError, load_config
    from erfi.nn import CheckpointError

    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags, env = _overrides(args)
        cfg = load_config(args.config, flags, env)
        model = cfg.model()  # resolve every typed view up front: bad values are config errors
        cfg.env_config()
        cfg.sweep_spec(model)
        if args.command == "sweep":
            _threads(args)
    except UsageError as exc:
        print(f"erfi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"erfi: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"erfi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"erfi: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError, CheckpointError) as exc:
        print(f"erfi: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
