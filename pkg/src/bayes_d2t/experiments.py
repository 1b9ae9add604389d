"""Method dispatch and evaluation shared by the CLI and the experiment scripts."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .baselines import BaselineKind, DetectionFrames, run_baseline
from .clustering import FrameObservations
from .io import ObjectRecord
from .metrics import ProbDetection, average_precision, pdq_frame
from .model import ModelParams, ObjectState
from .particle_filter import extract_tracks, run_filter
from .simulator import simulate
from .vsmc import build_training_data, train

METHODS = ("pf", "single", "frame-bayes", "greedy", "greedy-offset", "kalman")


def run_method(method: str, frames: Sequence[FrameObservations], params: ModelParams,
               num_particles: int = 100, seed: int = 0, min_score: float = 0.5,
               workers: Optional[int] = None) -> Tuple[DetectionFrames, Optional[float]]:
    """Run one method; returns per-frame records and the log-marginal (particle filter only)."""
    if method == "pf":
        if not frames:
            return [], 0.0
        history = run_filter(frames, params, num_particles, seed, workers=workers)
        out = extract_tracks(history)
        records = [
            [
                ObjectRecord(e.track_id, e.mean, int(np.argmax(e.class_probs)), e.confidence, e.cov,
                             e.class_probs)
                for e in ests
                if e.confidence >= min_score
            ]
            for ests in out.tracks
        ]
        return records, history[-1].log_marginal_estimate
    try:
        kind = BaselineKind(method)
    except ValueError:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}") from None
    return run_baseline(kind, frames, params, min_score), None


def to_detection(record: ObjectRecord, num_classes: int, default_var: float = 1.0) -> ProbDetection:
    cov = record.cov if record.cov is not None else default_var * np.eye(4)
    if record.class_probs is not None and record.class_probs.size == num_classes:
        probs = record.class_probs
    else:
        probs = np.zeros(num_classes)
        probs[min(record.class_id, num_classes - 1)] = 1.0
    return ProbDetection.from_box(record.box, cov, probs, record.confidence)


@dataclass(frozen=True)
class Evaluation:
    frame_pdq: List[float]
    frame_map: List[float]
    pdq: float
    map: float


def evaluate(records: Sequence[Sequence[ObjectRecord]], truth: Sequence[Sequence[ObjectState]],
             num_classes: int, default_var: float = 1.0, iou_threshold: float = 0.5) -> Evaluation:
    """Per-frame and sequence-level PDQ and mAP.

    Sequence PDQ is the mean of the per-frame scores; sequence mAP pools the
    detections of every frame before ranking.
    """
    if len(records) != len(truth):
        raise ValueError(f"prediction covers {len(records)} frames but truth covers {len(truth)}")
    dets = [[to_detection(r, num_classes, default_var) for r in frame] for frame in records]
    frame_pdq = [pdq_frame(d, g) for d, g in zip(dets, truth)]
    frame_map = [average_precision([d], [g], iou_threshold)[1] for d, g in zip(dets, truth)]
    _, seq_map = average_precision(dets, truth, iou_threshold)
    seq_pdq = float(np.mean(frame_pdq)) if frame_pdq else 1.0
    return Evaluation(frame_pdq, frame_map, seq_pdq, seq_map)


def align_by_frame(pred: Sequence[Tuple[int, List[ObjectRecord]]],
                   truth: Sequence[Tuple[int, List[ObjectRecord]]]):
    """Pair prediction and truth frames by index; missing prediction frames are empty."""
    by_frame = {t: recs for t, recs in pred}
    extra = sorted(set(by_frame) - {t for t, _ in truth})
    if extra:
        raise ValueError(f"predictions mention frames absent from the truth: {extra[:5]}")
    frames = [t for t, _ in truth]
    preds = [by_frame.get(t, []) for t in frames]
    gts = [[r.to_state() for r in recs] for _, recs in truth]
    return frames, preds, gts


@dataclass(frozen=True)
class SemiSupervisedOutcome:
    seed: int
    stage1_map: float
    stage2_map: float
    stage1_params: ModelParams
    stage2_params: ModelParams

    @property
    def gain(self) -> float:
        return self.stage2_map - self.stage1_map


def semi_supervised_trial(sim_config, init_params: ModelParams, train_config, label_fraction: float = 0.1,
                          horizon: int = 3, test_frames: Optional[int] = None, num_particles: int = 100,
                          min_score: float = 0.5, default_var: float = 1.0, iou_threshold: float = 0.5,
                          workers: Optional[int] = None) -> SemiSupervisedOutcome:
    """Train on one simulated scene, then score both training stages on a held-out scene.

    The training scene uses ``sim_config.seed``; the held-out scene, whose
    frames are all labeled, uses a seed derived from it. Both stages start
    from ``init_params`` and the particle filter evaluates each stage's
    motion model on the held-out frames by mAP.
    """
    seed = sim_config.seed
    scene = simulate(sim_config)
    rng = np.random.default_rng([seed, 7])
    data = build_training_data(scene.frames, scene.truth, label_fraction, horizon, rng)
    result = train(data, init_params, train_config)

    test_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    test = simulate(dataclasses.replace(
        sim_config, seed=test_seed, frames=sim_config.frames if test_frames is None else test_frames))
    scores = []
    for params in (result.stage1_params, result.params):
        records, _ = run_method("pf", test.frames, params, num_particles, seed, min_score, workers)
        scores.append(evaluate(records, test.truth, params.num_classes, default_var, iou_threshold).map)
    return SemiSupervisedOutcome(seed, scores[0], scores[1], result.stage1_params, result.params)


def semi_supervised_study(cfg, workers: Optional[int] = None) -> List[SemiSupervisedOutcome]:
    """Run :func:`semi_supervised_trial` for seeds ``run.seed + k``, ``k < bench.seeds``.

    ``cfg`` is a :class:`~bayes_d2t.config.RunConfig`. Training starts from
    the configured model with the drift ``b`` set to zero, so any gain comes
    from learning the drift.
    """
    true_params = cfg.model_params()
    motion = true_params.motion
    init = true_params.replace(motion=type(motion)(motion.A, np.zeros(4), motion.s))
    outcomes = []
    for k in range(cfg["bench.seeds"]):
        seed = cfg["run.seed"] + k
        outcomes.append(semi_supervised_trial(
            cfg.sim_config(seed=seed), init, cfg.train_config(seed=seed),
            label_fraction=cfg["train.label_fraction"], horizon=cfg["train.horizon"],
            num_particles=cfg["filter.particles"], min_score=cfg["filter.min_score"],
            default_var=cfg["metrics.default_var"], iou_threshold=cfg["metrics.iou_threshold"],
            workers=workers,
        ))
    return outcomes
