import csv
import json
import subprocess
import sys

import pytest

from bayes_d2t import io
from bayes_d2t.cli import main

SMALL = ["--set", "sim.frames=6", "--set", "sim.initial_rate=2.0"]


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def scene_dir(tmp_path, capsys):
    code, out, _ = _run(capsys, "simulate", "--seed", "42", *SMALL, "--out", str(tmp_path / "scene"))
    assert code == 0
    assert json.loads(out)["num_frames"] == 6
    return tmp_path / "scene"


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_pipeline_is_deterministic(scene_dir, tmp_path, capsys):
    outputs = []
    for k in range(2):
        tracks, metrics = tmp_path / f"t{k}.jsonl", tmp_path / f"m{k}.csv"
        assert _run(capsys, "track", str(scene_dir / "frames.jsonl"), "--seed", "42", "--particles", "32",
                    *SMALL, "--out", str(tracks))[0] == 0
        assert _run(capsys, "eval", str(tracks), str(scene_dir / "truth.jsonl"), "--out", str(metrics))[0] == 0
        outputs.append((tracks.read_bytes(), metrics.read_bytes()))
    assert outputs[0] == outputs[1]
    rows = _csv(tmp_path / "m0.csv")
    assert rows[0] == ["method", "frame_or_video", "pdq", "map"]
    assert rows[-1][1] == "video" and len(rows) == 6 + 2


def test_simulate_same_seed_same_bytes(tmp_path, capsys):
    for name in ("a", "b"):
        _run(capsys, "simulate", "--seed", "42", *SMALL, "--out", str(tmp_path / name))
    assert (tmp_path / "a" / "frames.jsonl").read_bytes() == (tmp_path / "b" / "frames.jsonl").read_bytes()
    assert (tmp_path / "a" / "truth.jsonl").read_bytes() == (tmp_path / "b" / "truth.jsonl").read_bytes()


def test_truth_as_tracks_scores_perfect_map(scene_dir, tmp_path, capsys):
    out = tmp_path / "m.csv"
    code, report, _ = _run(capsys, "eval", str(scene_dir / "truth.jsonl"), str(scene_dir / "truth.jsonl"),
                           "--out", str(out))
    assert code == 0
    assert json.loads(report)["map"] == pytest.approx(1.0)


@pytest.mark.parametrize("method", ["single", "frame-bayes", "greedy", "greedy-offset", "kalman"])
def test_track_every_method(scene_dir, tmp_path, capsys, method):
    out = tmp_path / "t.jsonl"
    code, report, _ = _run(capsys, "track", str(scene_dir / "frames.jsonl"), "--method", method, *SMALL,
                           "--out", str(out))
    assert code == 0 and json.loads(report)["method"] == method
    assert len(io.read_objects(out)) == 6


def test_refuses_to_overwrite(scene_dir, capsys):
    code, _, err = _run(capsys, "simulate", "--seed", "42", *SMALL, "--out", str(scene_dir))
    assert code == 1
    assert json.loads(err)["error"] == "output_exists"
    assert _run(capsys, "simulate", "--seed", "42", *SMALL, "--out", str(scene_dir), "--force")[0] == 0


def test_config_error_is_one_json_record(tmp_path, capsys):
    code, out, err = _run(capsys, "simulate", "--set", "sim.frames=-2", "--set", "nope=1",
                          "--out", str(tmp_path / "x"))
    assert code == 1 and out == ""
    record = json.loads(err)
    assert record["error"] == "config_error" and len(record["errors"]) == 2


def test_malformed_frames_file(tmp_path, capsys):
    bad = tmp_path / "frames.jsonl"
    bad.write_text("{not json}\n")
    code, _, err = _run(capsys, "track", str(bad), "--out", str(tmp_path / "t.jsonl"))
    assert code == 1
    assert "error" in json.loads(err)


def test_missing_input_file(tmp_path, capsys):
    code, _, err = _run(capsys, "track", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "t.jsonl"))
    assert code == 1
    assert "error" in json.loads(err)


def test_bench_row_count(tmp_path, capsys):
    out = tmp_path / "b.csv"
    code, report, _ = _run(capsys, "bench", *SMALL, "--set", "bench.seeds=2", "--particles", "16",
                           "--set", 'bench.methods=["pf", "single", "kalman"]', "--out", str(out))
    assert code == 0 and json.loads(report)["rows"] == 6
    rows = _csv(out)
    assert rows[0] == ["method", "seed", "pdq", "map"]
    assert [(r[0], r[1]) for r in rows[1:]] == [(m, s) for m in ("pf", "single", "kalman") for s in ("0", "1")]


def test_train_writes_params_and_curve(scene_dir, tmp_path, capsys):
    out = tmp_path / "p.json"
    code, report, _ = _run(capsys, "train", str(scene_dir), "--set", "train.label_fraction=0.5",
                           "--set", "train.horizon=1", "--set", "train.stage2_epochs=2",
                           "--set", "train.particles=8", "--set", "train.max_stage1_epochs=10",
                           "--out", str(out))
    assert code == 0
    rec = json.loads(report)
    assert rec["labeled_frames"] == 3
    rows = _csv(tmp_path / "p.curve.csv")
    assert rows[0] == ["stage", "epoch", "loss", "grad_norm"] and len(rows) - 1 == rec["epochs"]
    params = io.read_params(out)
    track_out = tmp_path / "t.jsonl"
    assert _run(capsys, "track", str(scene_dir / "frames.jsonl"), "--params", str(out), "--particles", "16",
                "--out", str(track_out))[0] == 0
    assert params.num_classes == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bayes_d2t", "simulate", *SMALL, "--out", str(tmp_path / "s")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["command"] == "simulate"
