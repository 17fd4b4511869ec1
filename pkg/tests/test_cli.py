import json
import subprocess
import sys

import numpy as np
import pytest

from dronepose.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, run

SUBCOMMANDS = ["generate", "train", "predict", "solve-pose", "smooth", "eval-kp", "eval-pose", "gradcheck", "gate-dump", "pipeline"]
TOY = ["--width", "64", "--height", "64", "--fx", "160", "--depth-min", "1.4", "--depth-max", "2.6"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_unknown_subcommand_is_usage_error(capsys):
    assert run(["bogus"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert run(["smooth", "--in", "a", "--out", "b", "--nope"]) == EXIT_USAGE


def test_missing_required_flag_is_usage_error():
    assert run(["generate", "--out", "x.jsonl"]) == EXIT_USAGE


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, capsys):
    assert run([sub, "--help"]) == EXIT_OK
    assert "--" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "dronepose.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pipeline" in out.stdout


def test_global_flags_before_or_after_subcommand():
    p = build_parser()
    assert p.parse_args(["--seed", "5", "smooth", "--in", "a", "--out", "b"]).seed == 5
    assert p.parse_args(["smooth", "--seed", "6", "--in", "a", "--out", "b"]).seed == 6


def test_missing_file_is_data_error(workdir, capsys):
    assert run(["eval-kp", "--data", "none.jsonl", "--pred", "p.jsonl"]) == EXIT_DATA
    assert "none.jsonl" in capsys.readouterr().err


def test_malformed_dataset_is_data_error(workdir):
    (workdir / "bad.jsonl").write_text('{"meta":{}}\n{"frame_id": 1\n')
    assert run(["solve-pose", "--data", "bad.jsonl", "--use-gt", "--out", "o.jsonl"]) == EXIT_DATA


def test_degenerate_keypoints_is_numerical_failure(workdir):
    assert run(["generate", "--frames", "3", "--out", "d.jsonl", "--quiet"]) == EXIT_OK
    rows = [json.dumps({"frame_id": i, "kp2d": [[5.0, 5.0]] * 4}) for i in range(3)]
    (workdir / "p.jsonl").write_text("\n".join(rows) + "\n")
    assert run(["solve-pose", "--data", "d.jsonl", "--pred", "p.jsonl", "--out", "o.jsonl"]) == EXIT_NUMERIC


def test_stage_by_stage(workdir):
    assert run(["--quiet", "generate", "--frames", "6", "--translation", "--rotation", "--sigma", "1", "--out", "d.jsonl", *TOY]) == EXIT_OK
    (workdir / "cfg.json").write_text(json.dumps({"epochs": 2, "batch_size": 3, "model": {"d": 16, "heads": 2, "layers": 2}}))
    assert run(["train", "--data", "d.jsonl", "--config", "cfg.json", "--out", "m.json", "--log", "log.csv", "--quiet"]) == EXIT_OK
    assert (workdir / "log.csv").read_text().splitlines()[0] == "epoch,loss,scale"
    assert run(["predict", "--data", "d.jsonl", "--model", "m.json", "--out", "p.jsonl"]) == EXIT_OK
    assert run(["eval-kp", "--data", "d.jsonl", "--pred", "p.jsonl", "--out", "rk.json"]) == EXIT_OK
    assert "sr90" in json.loads((workdir / "rk.json").read_text())
    assert run(["solve-pose", "--data", "d.jsonl", "--use-obs", "--out", "po.jsonl"]) == EXIT_OK
    row = json.loads((workdir / "po.jsonl").read_text().splitlines()[0])
    assert set(row) == {"frame_id", "sequence_id", "R", "t", "reproj_rmse", "converged"} and len(row["R"]) == 9
    assert run(["smooth", "--in", "po.jsonl", "--out", "ps.jsonl", "--q-pos", "1e-3"]) == EXIT_OK
    assert run(["eval-pose", "--data", "d.jsonl", "--pred", "ps.jsonl", "--out", "rp.json"]) == EXIT_OK
    assert {"mae_angle_deg", "rmse_m", "mae_m"} <= set(json.loads((workdir / "rp.json").read_text()))
    assert run(["gate-dump", "--model", "m.json", "--data", "d.jsonl", "--out", "g.csv"]) == EXIT_OK
    lines = (workdir / "g.csv").read_text().splitlines()
    assert lines[0] == "layer,gate_weight" and len(lines) == 3
    assert abs(sum(float(l.split(",")[1]) for l in lines[1:]) - 1) <= 1e-9


def test_solve_pose_with_gt_is_exact(workdir):
    from dronepose.datamodel import load_dataset
    from dronepose.metrics import reference_pose

    assert run(["generate", "--frames", "5", "--rotation", "--out", "d.jsonl", "--quiet"]) == EXIT_OK
    assert run(["solve-pose", "--data", "d.jsonl", "--use-gt", "--out", "po.jsonl"]) == EXIT_OK
    ds = load_dataset("d.jsonl")
    for rec, line in zip(ds.records, (workdir / "po.jsonl").read_text().splitlines()):
        row = json.loads(line)
        assert np.allclose(row["t"], reference_pose(rec).t, atol=1e-6) and row["reproj_rmse"] <= 1e-8


def test_pipeline_is_deterministic_and_contained(workdir):
    args = ["--seed", "7", "--quiet", "pipeline", "--frames", "6", "--epochs", "2", "--batch-size", "6"]
    assert run(args + ["--out-dir", "a"]) == EXIT_OK
    assert run(args + ["--out-dir", "b"]) == EXIT_OK
    names = sorted(p.name for p in (workdir / "a").iterdir())
    assert {"dataset.jsonl", "model.json", "pred_kp.jsonl", "report.json", "train_log.csv", "gates.csv"} <= set(names)
    for n in names:
        assert (workdir / "a" / n).read_bytes() == (workdir / "b" / n).read_bytes(), n
    assert sorted(p.name for p in workdir.iterdir()) == ["a", "b"]
    report = json.loads((workdir / "a" / "report.json").read_text())
    assert set(report["per_sequence"]) == {"seq11", "seq12", "seq13"}


def test_gradcheck_passes(capsys):
    assert run(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    worst = float(out.strip().splitlines()[-1].split()[-1])
    assert worst <= 1e-5


def test_threads_flag(workdir):
    assert run(["--threads", "1", "generate", "--frames", "2", "--out", "d.jsonl", "--quiet"]) == EXIT_OK
