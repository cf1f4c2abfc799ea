"""CSV and SVG emission plus the matching readers.

CSVs always carry a header row, use '.' decimals and '\\n' line endings.
Output names follow ``<subcommand>_<param>_<timestamp>.<ext>`` and are
created exclusively, so concurrent writers never clobber each other.
"""
from __future__ import annotations

import csv
import datetime as _dt
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from erfi.harness import SuccessCurve, TrialOutcome, TrialResult, aggregate
from erfi.ppo import CurveRecord

TRIAL_COLUMNS = ("policy_id", "param_tag", "param_value", "seed", "outcome", "distance_m",
                 "mean_speed_mps", "survival_s")
CURVE_COLUMNS = ("policy_id", "param_tag", "param_value", "trials", "successes", "rate",
                 "ci_halfwidth")
TRAINING_COLUMNS = ("iteration", "mean_reward", "mean_episode_len", "mean_speed")
STEP_COLUMNS = ("seed", "t", "q", "q_desired", "tau")
STEP_SUMMARY_COLUMNS = ("seed", "rise_time_s", "settling_time_s", "steady_state_offset_rad")


class OutputError(OSError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def create_output(run_dir, subcommand: str, param: str, ext: str):
    """Open a fresh ``<subcommand>_<param>_<timestamp>.<ext>`` for writing.

    The timestamp has microsecond resolution; on a collision a counter is
    appended.  Returns ``(path, file object)``.
    """
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create run directory {run_dir}: {e}") from e
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S_%f")
    base = f"{subcommand}_{param}_{stamp}"
    for k in range(1000):
        path = run_dir / (f"{base}.{ext}" if k == 0 else f"{base}-{k}.{ext}")
        try:
            return path, open(path, "x", newline="", encoding="utf-8")
        except FileExistsError:
            continue
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
    raise OutputError(f"could not find a free file name for {base} in {run_dir}")


class OutputSet:
    """Files of one CLI run sharing a single ``<subcommand>_<param>_<timestamp>`` stem.

    The stem is claimed by exclusively creating the resolved-config snapshot,
    so a concurrent run in the same directory always picks a different stem.
    """

    def __init__(self, run_dir, subcommand: str, param: str, config_text: str):
        path, fh = create_output(run_dir, subcommand, param, "ini")
        with fh:
            fh.write(config_text)
        self.config_path = path
        self.stem = path.with_suffix("")
        self.paths: list[Path] = [path]

    def path(self, suffix: str) -> Path:
        """Claim ``<stem><suffix>``, e.g. ``.csv`` or ``_curves.csv``."""
        p = self.stem.with_name(self.stem.name + suffix)
        try:
            open(p, "x").close()
        except OSError as e:
            raise OutputError(f"cannot create {p}: {e}") from e
        self.paths.append(p)
        return p


def write_csv(fh_or_path, columns, rows) -> None:
    own = isinstance(fh_or_path, (str, os.PathLike))
    fh = open(fh_or_path, "w", newline="", encoding="utf-8") if own else fh_or_path
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise OutputError(f"cannot write {getattr(fh, 'name', fh)}: {e}") from e
    finally:
        if own:
            fh.close()


def read_csv(path, columns) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(columns):
            raise ValueError(f"{path}: expected columns {list(columns)}, found {reader.fieldnames}")
        return list(reader)


# -- records -----------------------------------------------------------------

@dataclass
class StepTrajectories:
    """Step-response traces as read back from CSV (enough to re-plot them)."""

    seeds: np.ndarray
    t: np.ndarray
    q: np.ndarray
    q_desired: float


def trial_rows(results):
    return [(r.policy_id, r.param, r.value, r.seed, r.outcome, r.distance, r.mean_speed, r.survival)
            for r in results]


def read_trials(path) -> list[TrialResult]:
    return [TrialResult(d["policy_id"], d["param_tag"], float(d["param_value"]), int(d["seed"]),
                        TrialOutcome(d["outcome"]), float(d["distance_m"]),
                        float(d["mean_speed_mps"]), float(d["survival_s"]))
            for d in read_csv(path, TRIAL_COLUMNS)]


def curve_rows(curves):
    rows = []
    for c in curves:
        for v, n, s, r, ci in zip(c.values, c.trials, c.successes, c.rates, c.ci_halfwidth):
            rows.append((c.policy_id, c.param, float(v), int(n), int(s), float(r), float(ci)))
    return rows


def read_curves(path) -> dict[str, SuccessCurve]:
    rows = read_csv(path, CURVE_COLUMNS)
    out = {}
    for pid in sorted({d["policy_id"] for d in rows}):
        sel = [d for d in rows if d["policy_id"] == pid]
        out[pid] = SuccessCurve(pid, sel[0]["param_tag"], [float(d["param_value"]) for d in sel],
                                [int(d["trials"]) for d in sel], [int(d["successes"]) for d in sel],
                                np.array([float(d["ci_halfwidth"]) for d in sel]))
    return out


def training_rows(curve):
    return [(r.iteration, r.mean_reward, r.mean_episode_len, r.mean_speed) for r in curve]


def read_training_curve(path) -> list[CurveRecord]:
    return [CurveRecord(int(d["iteration"]), float(d["mean_reward"]), float(d["mean_episode_len"]),
                        float(d["mean_speed"])) for d in read_csv(path, TRAINING_COLUMNS)]


def step_rows(resp):
    rows = []
    for k, seed in enumerate(resp.seeds):
        for t, q, tau in zip(resp.t, resp.q[k], resp.tau[k]):
            rows.append((int(seed), float(t), float(q), resp.q_desired, float(tau)))
    return rows


def read_step_response(path) -> StepTrajectories:
    rows = read_csv(path, STEP_COLUMNS)
    seeds = sorted({int(d["seed"]) for d in rows})
    by_seed = {s: [d for d in rows if int(d["seed"]) == s] for s in seeds}
    first = by_seed[seeds[0]] if seeds else []
    return StepTrajectories(np.array(seeds), np.array([float(d["t"]) for d in first]),
                            np.array([[float(d["q"]) for d in by_seed[s]] for s in seeds]),
                            float(first[0]["q_desired"]) if first else 0.0)


def step_summary_rows(resp):
    return [(int(s), float(r), float(st), float(o)) for s, r, st, o in
            zip(resp.seeds, resp.rise_time, resp.settling_time, resp.steady_state_offset)]


# -- plots -------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "erfi"
    return plt


def plot_success_curves(curves, fh_or_path, title: str | None = None) -> None:
    """Success rate against the swept value, one line (``gid`` = policy id) per policy."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in curves:
        ax.errorbar(c.values, c.rates, yerr=c.ci_halfwidth, marker="o", ms=3, capsize=2,
                    label=c.policy_id, gid=c.policy_id)
    param = curves[0].param if curves else ""
    ax.set_xlabel(param)
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(fh_or_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trials_csv(csv_path, svg_path) -> None:
    curves = aggregate(read_trials(csv_path))
    plot_success_curves(list(curves.values()), svg_path)


def plot_step_response(resp, fh_or_path, max_lines: int = 10) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k in range(min(max_lines, len(resp.seeds))):
        ax.plot(resp.t, resp.q[k], lw=0.8, gid=f"seed{int(resp.seeds[k])}")
    ax.axhline(resp.q_desired, color="k", ls="--", lw=0.8)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("q [rad]")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(fh_or_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_training_curve(curve, fh_or_path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    it = [r.iteration for r in curve]
    ax.plot(it, [r.mean_reward for r in curve], label="mean reward", gid="mean_reward")
    ax.plot(it, [r.mean_speed for r in curve], label="mean speed", gid="mean_speed")
    ax.set_xlabel("iteration")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(fh_or_path, format="svg", metadata={"Date": None})
    plt.close(fig)
