import shutil
import subprocess
import sys

import numpy as np
import pytest

from gatt.cli import main
from gatt.data import read_pgm


def run_cli(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr().out
    report = {}
    for line in out.strip().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            report[k.strip()] = v.strip()
    return code, report


# ---------------------------------------------------------------------------
# verification subcommands

def test_check_equivariance_passes(capsys, tmp_path):
    code, rep = run_cli(capsys, "check-equivariance", "--group", "p4",
                        "--dtype", "f64", "--depth", "1",
                        "--trials", "1", "--out", str(tmp_path))
    assert code == 0
    assert rep["pass"] == "true"
    assert float(rep["max_err"]) <= 1e-10
    saved = (tmp_path / "check_equivariance.txt").read_text()
    assert "pass=true" in saved


def test_check_equivariance_tight_tolerance_fails(capsys):
    code, rep = run_cli(capsys, "check-equivariance", "--variant", "full",
                        "--depth", "1", "--trials", "1", "--dtype", "f64",
                        "--tolerance", "1e-30")
    assert code == 1
    assert rep["pass"] == "false"


def test_check_equivariance_detects_pose_bias(capsys):
    code, rep = run_cli(capsys, "check-equivariance", "--negative-control",
                        "per-h-bias", "--depth", "1", "--trials", "1",
                        "--dtype", "f64")
    assert code == 0  # detection is the passing outcome for a control
    assert rep["detected"] == "true"
    assert float(rep["max_err"]) > 1e-3


def test_check_equivariance_detects_broken_indexing(capsys):
    code, rep = run_cli(capsys, "check-equivariance", "--variant", "channel",
                        "--negative-control", "broken-w-indexing",
                        "--depth", "2", "--trials", "2", "--dtype", "f64")
    assert code == 0
    assert rep["detected"] == "true"


def test_thm1_oracle_passes(capsys):
    code, rep = run_cli(capsys, "thm1-oracle", "--group", "p4", "--dtype", "f64")
    assert code == 0
    assert rep["pass"] == "true"
    assert float(rep["max_err"]) <= 1e-10
    assert "gc_max_err_alpha_c" in rep and "lift_max_err_alpha_x" in rep


def test_thm1_oracle_detects_absolute_indexing(capsys):
    code, rep = run_cli(capsys, "thm1-oracle", "--negative-control",
                        "broken-w-indexing", "--dtype", "f64")
    assert code == 0
    assert rep["detected"] == "true" and rep["index_mode"] == "absolute"


def test_conv_oracle(capsys):
    code, rep = run_cli(capsys, "conv-oracle", "--dtype", "f64")
    assert code == 0
    assert rep["cases"] == "36"
    assert float(rep["max_err"]) <= 1e-12


def test_parity_demo_reports_and_dumps(capsys, tmp_path):
    code, rep = run_cli(capsys, "parity-demo", "--size", "8",
                        "--out", str(tmp_path))
    assert code == 0  # a measurement, not a pass/fail property
    assert float(rep["err_stride"]) > 0.1
    assert float(rep["err_pool"]) == 0.0
    assert rep["ratio"] == "inf"
    for name in ("parity_diff_stride.pgm", "parity_diff_pool.pgm"):
        plane = read_pgm(tmp_path / name)
        assert plane.shape == (4, 4)


def test_gradcheck_command(capsys):
    code, rep = run_cli(capsys, "gradcheck")
    assert code == 0
    assert float(rep["max_err"]) <= 1e-4
    assert "err_group_conv" in rep and "err_attentive_full" in rep


# ---------------------------------------------------------------------------
# usage and config errors

def test_unknown_config_key_exits_2(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    code = main(["gradcheck", "--config", str(cfg)])
    err = capsys.readouterr().err
    assert code == 2
    assert "unknown key" in err


def test_missing_config_file_exits_2(capsys, tmp_path):
    code = main(["gradcheck", "--config", str(tmp_path / "nope.cfg")])
    assert code == 2


def test_argparse_rejects_unknown_choice():
    with pytest.raises(SystemExit) as exc:
        main(["check-equivariance", "--group", "p8"])
    assert exc.value.code == 2


def test_missing_subcommand_rejected():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_rotmnist_without_data_dir_exits_2(capsys, monkeypatch):
    monkeypatch.delenv("GATT_DATA_DIR", raising=False)
    code = main(["train", "--data", "rotmnist", "--epochs", "1"])
    assert code == 2
    assert "data" in capsys.readouterr().err.lower()


def test_rotmnist_missing_files_exit_2(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("GATT_DATA_DIR", str(tmp_path))
    code = main(["train", "--data", "rotmnist", "--epochs", "1"])
    assert code == 2


# ---------------------------------------------------------------------------
# training and attention dumps

def _train_args(out_dir, *extra):
    return ["train", "--data", "synth", "--train-size", "64", "--epochs", "1",
            "--channels", "4", "--seed", "5", "--out", str(out_dir)] + list(extra)


def test_train_writes_log_and_checkpoint(capsys, tmp_path):
    code, rep = run_cli(capsys, *_train_args(tmp_path))
    assert code == 0
    assert 0.0 <= float(rep["test_acc"]) <= 1.0
    assert float(rep["test_err_percent"]) == pytest.approx(
        100.0 * (1.0 - float(rep["test_acc"])), abs=1e-6)
    log = (tmp_path / "train_log.txt").read_text()
    assert "final_val_acc=" in log and "epoch=0" in log
    assert (tmp_path / "model.ckpt").read_bytes()[:4] == b"GATT"


def test_train_is_deterministic(capsys, tmp_path):
    _, rep1 = run_cli(capsys, *_train_args(tmp_path / "a"))
    _, rep2 = run_cli(capsys, *_train_args(tmp_path / "b"))
    assert rep1["final_train_loss"] == rep2["final_train_loss"]
    assert rep1["test_acc"] == rep2["test_acc"]


def test_train_config_file_with_cli_override(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 9\nseed = 1\nvariant = plain\n")
    code = main(["train", "--config", str(cfg), "--data", "synth",
                 "--train-size", "32", "--epochs", "1", "--channels", "4"])
    out = capsys.readouterr().out
    assert code == 0
    # the --epochs flag overrides the config file's 9
    assert out.count("epoch=") == 1


def test_attend_round_trip(capsys, tmp_path):
    code, _ = run_cli(capsys, *_train_args(tmp_path, "--variant", "input"))
    assert code == 0
    code, rep = run_cli(capsys, "attend", "--checkpoint",
                        str(tmp_path / "model.ckpt"), "--variant", "input",
                        "--channels", "4", "--seed", "5", "--out", str(tmp_path))
    assert code == 0
    assert rep["pass"] == "true"
    assert float(rep["max_err"]) <= 1e-4
    for h in range(4):
        montage = read_pgm(tmp_path / f"attend_h{h}.pgm")
        assert montage.shape[0] == 16 * 8  # input extent x default upsample


def test_attend_plain_variant_exits_2(capsys, tmp_path):
    run_cli(capsys, *_train_args(tmp_path))
    code = main(["attend", "--checkpoint", str(tmp_path / "model.ckpt"),
                 "--variant", "plain", "--channels", "4"])
    assert code == 2
    assert "attention" in capsys.readouterr().err


def test_attend_checkpoint_mismatch_exits_2(capsys, tmp_path):
    run_cli(capsys, *_train_args(tmp_path, "--variant", "input"))
    # wrong width: the manifest no longer matches the rebuilt network
    code = main(["attend", "--checkpoint", str(tmp_path / "model.ckpt"),
                 "--variant", "input", "--channels", "8"])
    assert code == 2


# ---------------------------------------------------------------------------
# installed entry point

def test_console_entry_point_runs():
    exe = shutil.which("gatt")
    cmd = [exe] if exe else [sys.executable, "-m", "gatt.cli"]
    proc = subprocess.run(cmd + ["parity-demo", "--size", "8"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "err_stride=" in proc.stdout
