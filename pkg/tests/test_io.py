import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayes_d2t import io
from bayes_d2t.model import ModelParams, MotionParams
from bayes_d2t.simulator import SimConfig, export_scene, simulate


def _scene(seed=0, frames=6):
    return simulate(SimConfig(model=ModelParams(num_classes=3), frames=frames, seed=seed, initial_rate=2.0))


def test_scene_round_trip(tmp_path):
    scene = _scene()
    export_scene(scene, tmp_path / "f.jsonl", tmp_path / "t.jsonl")
    frames = io.read_frames(tmp_path / "f.jsonl")
    truth = io.read_objects(tmp_path / "t.jsonl", kind="truth")
    assert [f.frame_index for f in frames] == list(range(6))
    assert all(fa.anchors == fb.anchors for fa, fb in zip(frames, scene.frames))
    assert [[r.to_state() for r in recs] for _, recs in truth] == scene.truth


def test_empty_scene(tmp_path):
    scene = _scene(frames=0)
    export_scene(scene, tmp_path / "f.jsonl", tmp_path / "t.jsonl")
    assert io.read_frames(tmp_path / "f.jsonl") == []
    assert io.read_objects(tmp_path / "t.jsonl") == []


def _permute_keys(obj, rng):
    if isinstance(obj, dict):
        keys = list(obj)
        rng.shuffle(keys)
        return {k: _permute_keys(obj[k], rng) for k in keys}
    if isinstance(obj, list):
        return [_permute_keys(v, rng) for v in obj]
    return obj


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_field_order_irrelevant(tmp_path_factory, seed):
    tmp = tmp_path_factory.mktemp("perm")
    scene = _scene(seed % 50, frames=3)
    export_scene(scene, tmp / "f.jsonl", tmp / "t.jsonl")
    rng = np.random.default_rng(seed)
    for name in ("f.jsonl", "t.jsonl"):
        lines = (tmp / name).read_text().splitlines()
        shuffled = [json.dumps(_permute_keys(json.loads(line), rng)) for line in lines]
        (tmp / ("p" + name)).write_text("\n".join(shuffled) + "\n")
    assert all(a.anchors == b.anchors for a, b in zip(io.read_frames(tmp / "pf.jsonl"), scene.frames))
    assert io.read_objects(tmp / "pt.jsonl") == io.read_objects(tmp / "t.jsonl")


def test_refuses_overwrite(tmp_path):
    path = tmp_path / "x.jsonl"
    io.write_frames(path, [])
    with pytest.raises(FileExistsError, match="--force"):
        io.write_frames(path, [])
    io.write_frames(path, [], force=True)


def test_tracks_with_covariance_round_trip(tmp_path):
    rec = io.ObjectRecord(3, np.array([0, 0, 1, 1.5]), 1, 0.25, 0.3 * np.eye(4), np.array([0.2, 0.8]))
    io.write_objects(tmp_path / "tr.jsonl", [(4, [rec])], kind="tracks")
    ((t, (back,)),) = io.read_objects(tmp_path / "tr.jsonl", kind="tracks")
    assert t == 4 and back == rec


@pytest.mark.parametrize("bad,line", [
    ('{"schema": "bayes_d2t.truth", "version": 1}\n', 1),
    ('{"schema": "bayes_d2t.frames", "version": 2}\n', 1),
    ('{"schema": "bayes_d2t.frames", "version": 1}\n{"frame": 0, "anchors": [{"box": [0, 0, 1], "e": 0.5, "k": [1.0]}]}\n', 2),
    ('{"schema": "bayes_d2t.frames", "version": 1}\n{"frame": 0, "anchors": [{"box": [0, 0, 1, 1], "e": 1.5, "k": [1.0]}]}\n', 2),
    ('{"schema": "bayes_d2t.frames", "version": 1}\nnot json\n', 2),
])
def test_malformed_frames(tmp_path, bad, line):
    path = tmp_path / "bad.jsonl"
    path.write_text(bad)
    with pytest.raises(io.FormatError) as info:
        io.read_frames(path)
    assert info.value.line == line
    assert info.value.to_record()["error"] == "parse_error"


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = ModelParams(lambda_death=0.2, lambda_birth=1.3, alpha=2.5, num_classes=5,
                    motion=MotionParams(np.eye(4) + 0.1 * rng.standard_normal((4, 4)), rng.standard_normal(4),
                                        rng.standard_normal(4)))
    io.write_params(tmp_path / "p.json", p)
    q = io.read_params(tmp_path / "p.json")
    assert io.params_to_dict(q) == io.params_to_dict(p)


def test_params_missing_field(tmp_path):
    data = io.params_to_dict(ModelParams())
    del data["alpha"]
    (tmp_path / "p.json").write_text(json.dumps(data))
    with pytest.raises(io.FormatError, match="alpha"):
        io.read_params(tmp_path / "p.json")


def test_csv_round_trip_preserves_floats(tmp_path):
    rows = [("pf", 0, 0.1 + 0.2, float("nan")), ("single", 1, 1 / 3, 0.5)]
    io.write_csv(tmp_path / "x.csv", ("method", "seed", "pdq", "map"), rows)
    header, back = io.read_csv(tmp_path / "x.csv")
    assert header == ["method", "seed", "pdq", "map"]
    assert float(back[0][2]) == 0.1 + 0.2 and back[0][3] == "nan"
    assert float(back[1][2]) == 1 / 3
