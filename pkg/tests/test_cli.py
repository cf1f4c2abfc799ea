import subprocess
import sys

import pytest

from erfi.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = ["--set", "trainer.num_envs=4", "--set", "trainer.hidden=16", "--set", "trainer.horizon=8",
        "--iterations", "2"]


def run(tmp_path, *argv):
    return main([*argv, "--run-dir", str(tmp_path)])


def only(tmp_path, pattern):
    found = sorted(tmp_path.glob(pattern))
    assert len(found) == 1, found
    return found[0]


def test_validate_passes(capsys):
    assert main(["validate", "--fast"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "7/7 checks passed" in out and "FAIL" not in out


def test_train_is_reproducible_and_writes_artifacts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "train", "--seed", "7", *TINY) == EXIT_OK
    assert run(b, "train", "--seed", "7", *TINY) == EXIT_OK
    ckpt_a, ckpt_b = only(a, "train_NONE_*.ckpt"), only(b, "train_NONE_*.ckpt")
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
    assert only(a, "train_NONE_*.csv").read_text() == only(b, "train_NONE_*.csv").read_text()
    assert only(a, "train_NONE_*.svg").exists()
    snap = only(a, "train_NONE_*.ini").read_text()
    assert "seed = 7" in snap


def test_snapshot_rerun_is_bit_exact(tmp_path):
    assert run(tmp_path / "a", "train", "--seed", "3", "--strategy", "ERFI_50", *TINY) == EXIT_OK
    snap = only(tmp_path / "a", "train_ERFI_50_*.ini")
    assert run(tmp_path / "b", "train", "--config", str(snap)) == EXIT_OK
    assert (only(tmp_path / "a", "*.ckpt").read_bytes()
            == only(tmp_path / "b", "*.ckpt").read_bytes())


def test_seed_environment_variable_and_flag_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("ERFI_SEED", "7")
    assert run(tmp_path / "env", "train", *TINY) == EXIT_OK
    assert run(tmp_path / "flag", "train", "--seed", "7", *TINY) == EXIT_OK
    assert (only(tmp_path / "env", "*.ckpt").read_bytes()
            == only(tmp_path / "flag", "*.ckpt").read_bytes())
    assert run(tmp_path / "both", "train", "--seed", "8", *TINY) == EXIT_OK
    assert "seed = 8" in only(tmp_path / "both", "*.ini").read_text()


def test_evaluate_sweep_and_plot(tmp_path, capsys):
    assert run(tmp_path, "train", *TINY) == EXIT_OK
    ckpt = only(tmp_path, "*.ckpt")
    short = ["--set", "sweep.trials=2", "--set", "sweep.budget=0.5", "--set", "sweep.grid=1.0, 2.0"]
    assert run(tmp_path, "evaluate", str(ckpt), *short, "--dump-trajectory") == EXIT_OK
    assert "success" in capsys.readouterr().out
    trace = only(tmp_path, "evaluate_*_trajectory.csv").read_text().splitlines()
    assert trace[0].startswith("t,q_x,q_z,q_pitch") and trace[0].endswith("joint_acc")
    assert len(trace) == 2 + 25
    assert run(tmp_path, "sweep", f"tiny={ckpt}", *short, "--threads", "2") == EXIT_OK
    trials = only(tmp_path, "sweep_BASE_MASS_SCALE_*[0-9].csv")
    assert only(tmp_path, "sweep_BASE_MASS_SCALE_*_curves.csv").exists()
    assert run(tmp_path, "plot", str(trials)) == EXIT_OK
    svg = only(tmp_path, "plot_*.svg").read_text()
    assert 'id="tiny"' in svg


def test_step_response_outputs(tmp_path, capsys):
    assert run(tmp_path, "step-response", "--mode", "RAO", "--set", "step_response.seeds=3",
               "--set", "step_response.offset=5") == EXIT_OK
    out = capsys.readouterr().out
    assert "steady_state_offset_mean 0.333" in out
    assert only(tmp_path, "step-response_RAO_*_summary.csv").exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["train", "--set", "injection.tua_lim_r=6"],
    ["train", "--set", "trainer.gamma=2"],
    ["train", "--strategy", "SOMETIMES"],
    ["sweep", "x.ckpt", "--threads", "0"],
    [],
])
def test_usage_and_config_errors_exit_1(tmp_path, argv):
    assert run(tmp_path, *argv) == EXIT_USAGE


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert run(tmp_path, "evaluate", str(tmp_path / "missing.ckpt")) == EXIT_RUNTIME
    assert "missing.ckpt" in capsys.readouterr().err
    assert run(tmp_path, "sweep", str(tmp_path / "missing.ckpt")) == EXIT_RUNTIME
    assert run(tmp_path, "plot", str(tmp_path / "missing.csv")) == EXIT_RUNTIME
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE1234")
    assert run(tmp_path, "evaluate", str(bad)) == EXIT_RUNTIME


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "erfi.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "validate" in r.stdout
