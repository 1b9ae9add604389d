"""Synthetic scenes drawn from the model's dynamics and emission densities."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .clustering import FrameObservations
from .model import AnchorObservation, ModelParams, ObjectState

_MAX_TRIES = 100
_EDGE = 1e-12


@dataclass(frozen=True, eq=False)
class SimConfig:
    model: ModelParams = field(default_factory=ModelParams)
    frames: int = 50
    anchor_rate: float = 3.0
    clutter_rate: float = 1.0
    emit_cov: np.ndarray = field(default_factory=lambda: np.eye(4))
    arena: tuple = (-50.0, -50.0, 50.0, 50.0)
    min_size: float = 1.0
    initial_rate: Optional[float] = None  # frame-0 birth rate; defaults to lambda_birth
    occlusion_prob: float = 0.0  # per object-frame chance its anchors look like clutter
    seed: int = 0

    def __post_init__(self):
        if self.frames < 0:
            raise ValueError("frames must be non-negative")
        if self.anchor_rate < 0 or self.clutter_rate < 0:
            raise ValueError("anchor and clutter rates must be non-negative")
        cov = np.asarray(self.emit_cov, dtype=np.float64).reshape(4, 4)
        w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if w.min() < 0:
            raise ValueError("emit_cov must be positive semi-definite")
        object.__setattr__(self, "emit_cov", cov)
        x0, y0, x1, y1 = self.arena
        if not (x0 < x1 and y0 < y1):
            raise ValueError("arena must be (x_min, y_min, x_max, y_max)")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")


@dataclass
class Scene:
    truth: List[List[ObjectState]]
    frames: List[FrameObservations]


def _valid(box, config: SimConfig) -> bool:
    return box[2] - box[0] >= config.min_size and box[3] - box[1] >= config.min_size


def _clip(box, config: SimConfig):
    x0, y0, x1, y1 = config.arena
    return np.array([
        np.clip(box[0], x0, x1), np.clip(box[1], y0, y1),
        np.clip(box[2], x0, x1), np.clip(box[3], y0, y1),
    ])


def _birth_box(config: SimConfig, rng) -> Optional[np.ndarray]:
    m = config.model
    for _ in range(_MAX_TRIES):
        box = _clip(rng.multivariate_normal(m.prior_mean, m.prior_cov), config)
        if _valid(box, config):
            return box
    return None


def generate_truth(config: SimConfig, rng: np.random.Generator) -> List[List[ObjectState]]:
    """Ground-truth objects per frame under birth/death and linear-Gaussian motion."""
    m = config.model
    std = np.exp(m.motion.s)
    truth: List[List[ObjectState]] = []
    next_id = 0
    current: List[ObjectState] = []
    for t in range(config.frames):
        survivors = []
        if t > 0:
            for obj in current:
                if rng.random() < m.lambda_death:
                    continue
                mean = m.motion.predict(obj.box)
                for _ in range(_MAX_TRIES):
                    box = _clip(mean + std * rng.standard_normal(4), config)
                    if _valid(box, config):
                        survivors.append(ObjectState(box, obj.class_id, obj.track_id))
                        break
        rate = m.lambda_birth if (t > 0 or config.initial_rate is None) else config.initial_rate
        for _ in range(rng.poisson(rate)):
            box = _birth_box(config, rng)
            if box is None:
                continue
            survivors.append(ObjectState(box, int(rng.integers(m.num_classes)), next_id))
            next_id += 1
        current = survivors
        truth.append(list(current))
    return truth


def _anchor_boxes(center, count, config: SimConfig, rng):
    boxes = []
    for _ in range(count):
        for _ in range(_MAX_TRIES):
            box = rng.multivariate_normal(center, config.emit_cov)
            if box[0] < box[2] and box[1] < box[3]:
                boxes.append(box)
                break
    return boxes


def _scores(concentration, rng):
    k = rng.dirichlet(concentration)
    k = np.clip(k, _EDGE, None)
    return k / k.sum()


def render_anchors(truth_frame: List[ObjectState], frame_index: int, config: SimConfig,
                   rng: np.random.Generator) -> FrameObservations:
    """Anchors for one frame: each live object emits 1 + Poisson(anchor_rate) anchors."""
    m = config.model
    alpha, K = m.alpha, m.num_classes
    anchors = []
    for obj in truth_frame:
        occluded = rng.random() < config.occlusion_prob
        n = 1 + rng.poisson(config.anchor_rate)
        conc = np.ones(K)
        conc[obj.class_id] += alpha
        for box in _anchor_boxes(obj.box, n, config, rng):
            e = rng.beta(1.0, alpha + 1.0) if occluded else rng.beta(alpha + 1.0, 1.0)
            anchors.append(AnchorObservation(box, float(np.clip(e, _EDGE, 1 - _EDGE)), _scores(conc, rng)))
    for _ in range(rng.poisson(config.clutter_rate)):
        center = _birth_box(config, rng)
        n = 1 + rng.poisson(config.anchor_rate)
        if center is None:
            continue
        for box in _anchor_boxes(center, n, config, rng):
            e = rng.beta(1.0, alpha + 1.0)
            anchors.append(AnchorObservation(box, float(np.clip(e, _EDGE, 1 - _EDGE)), _scores(np.ones(K), rng)))
    order = rng.permutation(len(anchors))
    return FrameObservations(frame_index, [anchors[j] for j in order])


def simulate(config: SimConfig) -> Scene:
    truth = generate_truth(config, np.random.default_rng([config.seed, 0]))
    frames = [
        render_anchors(objs, t, config, np.random.default_rng([config.seed, 1, t]))
        for t, objs in enumerate(truth)
    ]
    return Scene(truth, frames)


def export_scene(scene: Scene, frames_path, truth_path, force: bool = False):
    """Write the anchors and the ground truth as JSONL files."""
    from .io import truth_frames, write_frames, write_objects

    write_frames(Path(frames_path), scene.frames, force=force)
    write_objects(Path(truth_path), truth_frames(scene.truth), kind="truth", force=force)
