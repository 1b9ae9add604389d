"""Run configuration: flat dotted keys with JSON literal values.

A config file holds one ``key = value`` pair per line, where ``value`` is a
JSON literal (number, string, list, ``true``/``false``/``null``). Lines that
are blank or start with ``#`` are ignored. Command-line ``--set key=value``
overrides use the same syntax. Unknown keys are rejected and every
validation error is reported at once.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .experiments import METHODS
from .model import ModelParams, MotionParams
from .simulator import SimConfig
from .vsmc import TrainConfig


class ConfigError(ValueError):
    """One or more invalid config entries."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))

    def to_record(self) -> dict:
        return {"error": "config_error", "errors": self.errors}


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _integer(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _vector(n):
    def check(v):
        return isinstance(v, list) and len(v) == n and all(_number(x) for x in v)
    return check


def _matrix_or_scalar(v):
    return _number(v) or _vector(16)(v)


def _optional_number(v):
    return v is None or _number(v)


def _method_list(v):
    return isinstance(v, list) and len(v) > 0 and all(isinstance(x, str) and x in METHODS for x in v)


def _method(v):
    return isinstance(v, str) and v in METHODS


# key -> (default, validator, description of the expected value)
SCHEMA: Dict[str, Tuple[Any, Callable[[Any], bool], str]] = {
    "model.lambda_death": (0.05, _number, "number in [0, 1)"),
    "model.lambda_birth": (0.5, _number, "non-negative number"),
    "model.alpha": (1.0, _number, "non-negative number"),
    "model.prior_mean": ([-5.0, -5.0, 5.0, 5.0], _vector(4), "list of 4 numbers"),
    "model.prior_cov": (25.0, _matrix_or_scalar, "number (times identity) or list of 16 numbers"),
    "model.num_classes": (2, _integer, "positive integer"),
    "model.iou_min": (0.3, _number, "number in (0, 1]"),
    "model.eps_pd": (1e-6, _number, "positive number"),
    "model.cluster_iou": (0.5, _number, "number in [0, 1)"),
    "model.motion.A": (None, lambda v: v is None or _vector(16)(v), "null (identity) or list of 16 numbers"),
    "model.motion.b": ([0.0, 0.0, 0.0, 0.0], _vector(4), "list of 4 numbers"),
    "model.motion.s": ([0.0, 0.0, 0.0, 0.0], _vector(4), "list of 4 numbers"),
    "sim.frames": (50, _integer, "non-negative integer"),
    "sim.anchor_rate": (3.0, _number, "non-negative number"),
    "sim.clutter_rate": (1.0, _number, "non-negative number"),
    "sim.emit_cov": (1.0, _matrix_or_scalar, "number (times identity) or list of 16 numbers"),
    "sim.arena": ([-50.0, -50.0, 50.0, 50.0], _vector(4), "list of 4 numbers"),
    "sim.min_size": (1.0, _number, "non-negative number"),
    "sim.initial_rate": (None, _optional_number, "null or non-negative number"),
    "sim.occlusion_prob": (0.0, _number, "number in [0, 1]"),
    "run.seed": (0, _integer, "non-negative integer"),
    "run.method": ("pf", _method, "one of the method names"),
    "filter.particles": (100, _integer, "positive integer"),
    "filter.min_score": (0.5, _number, "number in [0, 1]"),
    "metrics.iou_threshold": (0.5, _number, "number in (0, 1]"),
    "metrics.default_var": (1.0, _number, "positive number"),
    "bench.seeds": (20, _integer, "positive integer"),
    "bench.methods": (
        ["pf", "single", "frame-bayes", "greedy", "greedy-offset", "kalman"],
        _method_list,
        "non-empty list of method names",
    ),
    "train.label_fraction": (0.1, _number, "number in (0, 1]"),
    "train.horizon": (3, _integer, "non-negative integer"),
    "train.learning_rate": (0.01, _number, "non-negative number"),
    "train.clip_norm": (10.0, _number, "positive number"),
    "train.plateau_tol": (1e-4, _number, "non-negative number"),
    "train.plateau_epochs": (5, _integer, "positive integer"),
    "train.max_stage1_epochs": (500, _integer, "non-negative integer"),
    "train.stage2_epochs": (20, _integer, "non-negative integer"),
    "train.particles": (64, _integer, "integer >= 2"),
}


def parse_value(text: str, where: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{where}: value is not a JSON literal ({exc.msg})"]) from None


def parse_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    errors: List[str] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition("=")
        key = key.strip()
        where = f"{source}:{number}"
        if not sep or not key:
            errors.append(f"{where}: expected 'key = value'")
            continue
        if key in values:
            errors.append(f"{where}: duplicate key {key!r}")
            continue
        try:
            values[key] = parse_value(rest.strip(), where)
        except ConfigError as exc:
            errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return values


def parse_override(item: str) -> Tuple[str, Any]:
    key, sep, rest = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
    return key.strip(), parse_value(rest.strip(), f"--set {key.strip()}")


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (default, _, _) in SCHEMA.items()}
        errors = [f"unknown key {k!r}" for k in self.values if k not in SCHEMA]
        bad = set()
        for k, v in self.values.items():
            if k in SCHEMA:
                _, check, expect = SCHEMA[k]
                if not check(v):
                    errors.append(f"{k}: expected {expect}, got {v!r}")
                    bad.add(k)
                merged[k] = v
        errors.extend(_range_errors(merged, bad))
        if not errors:
            try:
                _build_model(merged)
            except ValueError as exc:
                errors.append(f"model: {exc}")
        if errors:
            raise ConfigError(errors)
        object.__setattr__(self, "values", merged)

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> "RunConfig":
        values: Dict[str, Any] = {}
        if path is not None:
            p = Path(path)
            try:
                text = p.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError([f"{p}: {exc.strerror or exc}"]) from None
            values.update(parse_text(text, str(p)))
        errors = []
        for item in overrides:
            try:
                k, v = parse_override(item)
                values[k] = v
            except ConfigError as exc:
                errors.extend(exc.errors)
        if errors:
            raise ConfigError(errors)
        return cls(values)

    def with_values(self, **changes) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in changes.items()})
        return RunConfig(vals)

    def model_params(self) -> ModelParams:
        return _build_model(self.values)

    def sim_config(self, seed: Optional[int] = None) -> SimConfig:
        v = self.values
        return SimConfig(
            model=self.model_params(),
            frames=v["sim.frames"],
            anchor_rate=float(v["sim.anchor_rate"]),
            clutter_rate=float(v["sim.clutter_rate"]),
            emit_cov=_cov(v["sim.emit_cov"]),
            arena=tuple(float(x) for x in v["sim.arena"]),
            min_size=float(v["sim.min_size"]),
            initial_rate=v["sim.initial_rate"],
            occlusion_prob=float(v["sim.occlusion_prob"]),
            seed=int(v["run.seed"] if seed is None else seed),
        )

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            learning_rate=float(v["train.learning_rate"]),
            clip_norm=float(v["train.clip_norm"]),
            plateau_tol=float(v["train.plateau_tol"]),
            plateau_epochs=int(v["train.plateau_epochs"]),
            max_stage1_epochs=int(v["train.max_stage1_epochs"]),
            stage2_epochs=int(v["train.stage2_epochs"]),
            num_particles=int(v["train.particles"]),
            seed=int(v["run.seed"] if seed is None else seed),
        )


def _cov(v) -> np.ndarray:
    if _number(v):
        return float(v) * np.eye(4)
    return np.array(v, dtype=np.float64).reshape(4, 4)


def _build_model(v) -> ModelParams:
    A = np.eye(4) if v["model.motion.A"] is None else np.array(v["model.motion.A"], dtype=np.float64).reshape(4, 4)
    return ModelParams(
        lambda_death=float(v["model.lambda_death"]),
        lambda_birth=float(v["model.lambda_birth"]),
        alpha=float(v["model.alpha"]),
        prior_mean=np.array(v["model.prior_mean"], dtype=np.float64),
        prior_cov=_cov(v["model.prior_cov"]),
        num_classes=int(v["model.num_classes"]),
        motion=MotionParams(A, np.array(v["model.motion.b"], dtype=np.float64),
                            np.array(v["model.motion.s"], dtype=np.float64)),
        iou_min=float(v["model.iou_min"]),
        eps_pd=float(v["model.eps_pd"]),
        cluster_iou=float(v["model.cluster_iou"]),
    )


def _range_errors(v, skip=frozenset()) -> List[str]:
    """Range checks for keys whose type is already valid (keys in ``skip`` are not)."""
    errors = []

    def need(key, ok, text):
        if key in skip:
            return
        if not ok():
            errors.append(f"{key}: expected {text}, got {v[key]!r}")

    need("sim.frames", lambda: v["sim.frames"] >= 0, "non-negative integer")
    need("sim.anchor_rate", lambda: v["sim.anchor_rate"] >= 0, "non-negative number")
    need("sim.clutter_rate", lambda: v["sim.clutter_rate"] >= 0, "non-negative number")
    need("sim.min_size", lambda: v["sim.min_size"] >= 0, "non-negative number")
    need("sim.initial_rate", lambda: v["sim.initial_rate"] is None or v["sim.initial_rate"] >= 0, "null or non-negative number")
    need("sim.occlusion_prob", lambda: 0 <= v["sim.occlusion_prob"] <= 1, "number in [0, 1]")
    need("run.seed", lambda: v["run.seed"] >= 0, "non-negative integer")
    need("filter.particles", lambda: v["filter.particles"] >= 1, "positive integer")
    need("filter.min_score", lambda: 0 <= v["filter.min_score"] <= 1, "number in [0, 1]")
    need("metrics.iou_threshold", lambda: 0 < v["metrics.iou_threshold"] <= 1, "number in (0, 1]")
    need("metrics.default_var", lambda: v["metrics.default_var"] > 0, "positive number")
    need("bench.seeds", lambda: v["bench.seeds"] >= 1, "positive integer")
    need("train.label_fraction", lambda: 0 < v["train.label_fraction"] <= 1, "number in (0, 1]")
    need("train.horizon", lambda: v["train.horizon"] >= 0, "non-negative integer")
    need("train.learning_rate", lambda: v["train.learning_rate"] >= 0, "non-negative number")
    need("train.clip_norm", lambda: v["train.clip_norm"] > 0, "positive number")
    need("train.plateau_tol", lambda: v["train.plateau_tol"] >= 0, "non-negative number")
    need("train.plateau_epochs", lambda: v["train.plateau_epochs"] >= 1, "positive integer")
    need("train.max_stage1_epochs", lambda: v["train.max_stage1_epochs"] >= 0, "non-negative integer")
    need("train.stage2_epochs", lambda: v["train.stage2_epochs"] >= 0, "non-negative integer")
    need("train.particles", lambda: v["train.particles"] >= 2, "integer >= 2")
    if "sim.emit_cov" not in skip and _number(v["sim.emit_cov"]):
        need("sim.emit_cov", lambda: v["sim.emit_cov"] >= 0, "non-negative number")
    return errors
