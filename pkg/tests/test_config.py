from pathlib import Path

import numpy as np
import pytest

from bayes_d2t.config import SCHEMA, ConfigError, RunConfig, parse_override, parse_text


def test_defaults_build_valid_objects():
    cfg = RunConfig()
    assert cfg.model_params().num_classes == 2
    np.testing.assert_array_equal(cfg.model_params().motion.A, np.eye(4))
    assert cfg.sim_config().frames == 50
    assert cfg.train_config().num_particles == 64
    assert set(cfg.values) == set(SCHEMA)


def test_parse_text_reads_json_literals():
    text = "# comment\n\nmodel.alpha = 0.5\nbench.methods = [\"pf\", \"kalman\"]\nsim.initial_rate = null\n"
    assert parse_text(text) == {"model.alpha": 0.5, "bench.methods": ["pf", "kalman"], "sim.initial_rate": None}


def test_parse_text_reports_every_line_error():
    with pytest.raises(ConfigError) as info:
        parse_text("a = 1\nnot a pair\nb = [1,\na = 2\n", "f.cfg")
    errors = info.value.errors
    assert len(errors) == 3
    assert errors[0].startswith("f.cfg:2") and errors[1].startswith("f.cfg:3") and "duplicate" in errors[2]


def test_unknown_keys_rejected_together():
    with pytest.raises(ConfigError) as info:
        RunConfig({"model.alpah": 1.0, "sim.frame": 3})
    assert sorted(info.value.errors) == ["unknown key 'model.alpah'", "unknown key 'sim.frame'"]


@pytest.mark.parametrize("key,value", [
    ("model.num_classes", 1.5),
    ("model.prior_mean", [1, 2, 3]),
    ("run.method", "particle"),
    ("run.seed", True),
    ("sim.frames", -1),
    ("filter.particles", 0),
    ("train.particles", 1),
    ("train.label_fraction", 0.0),
    ("metrics.iou_threshold", 1.5),
    ("sim.occlusion_prob", 2.0),
    ("bench.methods", []),
    ("model.alpha", float("nan")),
])
def test_invalid_values_rejected(key, value):
    with pytest.raises(ConfigError) as info:
        RunConfig({key: value})
    assert any(key in e for e in info.value.errors)


def test_all_value_errors_reported_at_once():
    with pytest.raises(ConfigError) as info:
        RunConfig({"sim.frames": -1, "filter.particles": 0, "bogus": 1})
    assert len(info.value.errors) == 3


def test_model_constraint_violation_surfaces():
    with pytest.raises(ConfigError) as info:
        RunConfig({"model.lambda_death": 1.5})
    assert any("model" in e for e in info.value.errors)


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("model.alpha = 0.5\nrun.seed = 3\n")
    cfg = RunConfig.load(str(p), ["run.seed=9"])
    assert cfg["model.alpha"] == 0.5 and cfg["run.seed"] == 9


def test_override_syntax_errors():
    with pytest.raises(ConfigError):
        parse_override("run.seed")
    with pytest.raises(ConfigError):
        parse_override("run.seed=nine")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(str(tmp_path / "absent.cfg"))


def test_scalar_and_matrix_covariances():
    cfg = RunConfig({"sim.emit_cov": 2.0, "model.prior_cov": list(np.diag([1.0, 2, 3, 4]).ravel())})
    np.testing.assert_array_equal(cfg.sim_config().emit_cov, 2 * np.eye(4))
    np.testing.assert_array_equal(np.diag(cfg.model_params().prior_cov), [1, 2, 3, 4])


def test_with_values_revalidates():
    cfg = RunConfig().with_values(run__seed=5)
    assert cfg["run.seed"] == 5
    with pytest.raises(ConfigError):
        cfg.with_values(run__seed=-5)


def test_error_record_shape():
    with pytest.raises(ConfigError) as info:
        RunConfig({"x": 1})
    assert info.value.to_record() == {"error": "config_error", "errors": ["unknown key 'x'"]}


@pytest.mark.parametrize("name", ["benchmark.cfg", "semi_supervised.cfg"])
def test_shipped_configs_load(name):
    RunConfig.load(str(Path(__file__).resolve().parents[1] / "configs" / name))
