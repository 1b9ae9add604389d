"""Semi-supervised learning of the motion model with a particle-filter ELBO.

For a labeled frame with ``T`` unlabeled neighbors on each side the surrogate
objective is

    ELBO = log p(labeled anchors | labels)
           + sum over forward frames of log(mean particle weight)
           + sum over backward frames of log(mean particle weight),

where both particle filters start with every particle exactly at the labels.
The backward pass runs the same filter on the time-reversed neighbors with
the reversed motion model of :func:`reverse_motion`. The gradient is the
weight-averaged score of the motion density at the sampled (frozen)
transitions; gradients through the proposal are omitted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .clustering import FrameObservations, cluster_anchors
from .losses import LabeledFrame, label_assignment, labeled_transitions, track_loss
from .model import ModelParams, MotionParams, joint_emission_log_prob, joint_transition_log_prob
from .particle_filter import FilterState, PropagationRecord, step

FORWARD_STREAM = 0
BACKWARD_STREAM = 1


@dataclass
class SemiSupervisedBatch:
    labeled: LabeledFrame
    forward_frames: List[FrameObservations] = field(default_factory=list)
    backward_frames: List[FrameObservations] = field(default_factory=list)  # nearest first

    def __post_init__(self):
        t0 = self.labeled.frame.frame_index
        for step_dir, frames in ((1, self.forward_frames), (-1, self.backward_frames)):
            for k, f in enumerate(frames, start=1):
                if f.frame_index != t0 + step_dir * k:
                    raise ValueError(
                        f"frame {f.frame_index} is not contiguous with labeled frame {t0}"
                    )

    @classmethod
    def around(cls, frames: Sequence[FrameObservations], labels: Sequence, index: int,
               horizon: int) -> "SemiSupervisedBatch":
        """Batch centred on ``frames[index]`` with up to ``horizon`` neighbors per side."""
        fwd = list(frames[index + 1: index + 1 + horizon])
        bwd = list(frames[max(0, index - horizon): index])[::-1]
        return cls(LabeledFrame(frames[index], list(labels)), fwd, bwd)


@dataclass
class ElboReport:
    elbo: float
    supervised: float
    forward: List[float]
    backward: List[float]
    gradient: MotionParams
    ess_forward: List[float]
    ess_backward: List[float]


def reverse_motion(motion: MotionParams) -> MotionParams:
    """Motion model for stepping backward in time: ``x_prev ~ N(A^-1 (x - b), diag exp 2s)``.

    The mean inverts the forward map exactly. The noise keeps the forward
    scales, which is exact when ``A`` is the identity and a diagonal
    approximation of ``A^-1 Q A^-T`` otherwise.
    """
    inv = np.linalg.inv(motion.A)
    return MotionParams(inv, -inv @ motion.b, motion.s.copy())


def reverse_motion_grad(motion: MotionParams, grad_reversed: np.ndarray) -> np.ndarray:
    """Map a gradient with respect to ``reverse_motion(motion)`` back to ``motion`` (24-vectors)."""
    inv = np.linalg.inv(motion.A)
    g = MotionParams.from_vector(grad_reversed)
    # d(A^-1) = -A^-1 dA A^-1 and d(-A^-1 b) = A^-1 dA A^-1 b - A^-1 db
    grad_A = -inv.T @ g.A @ inv.T + np.outer(inv.T @ g.b, inv @ motion.b)
    grad_b = -inv.T @ g.b
    return np.concatenate([grad_A.reshape(-1), grad_b, g.s])


def _run_direction(batch, frames, params, N, seed, stream, workers):
    state = FilterState.initial(N, params.num_classes, seed, batch.labeled.objects, stream)
    terms, ess = [], []
    grad = np.zeros(24)
    for frame in frames:
        state = step(state, frame, params, workers=workers)
        terms.append(state.frame_log_mean_weight)
        ess.append(state.ess)
        tr = state.transitions
        if tr is not None and tr.owner.size:
            w = np.exp(state.particles.log_weights)[tr.owner]
            grad -= track_loss(tr.prev_boxes, tr.new_boxes, params.motion, w)[1]
    return terms, ess, grad


def supervised_term(labeled: LabeledFrame, params: ModelParams) -> float:
    """Emission log-likelihood of the labeled frame's anchors given its labels."""
    clusters, assignment = label_assignment(labeled.frame, labeled.objects, params)
    return float(joint_emission_log_prob(labeled.frame.anchors, clusters, labeled.objects, assignment, params))


def elbo_estimate(batch: SemiSupervisedBatch, params: ModelParams, num_particles: int, seed: int = 0,
                  workers: Optional[int] = None) -> ElboReport:
    if num_particles < 2:
        raise ValueError("elbo_estimate needs at least two particles")
    sup = supervised_term(batch.labeled, params)
    fwd, ess_f, g_f = _run_direction(batch, batch.forward_frames, params, num_particles, seed,
                                     FORWARD_STREAM, workers)
    backward_params = params.replace(motion=reverse_motion(params.motion)) if batch.backward_frames else params
    bwd, ess_b, g_b = _run_direction(batch, batch.backward_frames, backward_params, num_particles, seed,
                                     BACKWARD_STREAM, workers)
    if batch.backward_frames:
        g_b = reverse_motion_grad(params.motion, g_b)
    total = sup + math.fsum(fwd) + math.fsum(bwd)
    return ElboReport(total, sup, fwd, bwd, MotionParams.from_vector(g_f + g_b), ess_f, ess_b)


def elbo_gradient(batch: SemiSupervisedBatch, params: ModelParams, num_particles: int, seed: int = 0,
                  workers: Optional[int] = None) -> MotionParams:
    return elbo_estimate(batch, params, num_particles, seed, workers).gradient


def frozen_log_weight(record: PropagationRecord, frame: FrameObservations, params: ModelParams) -> float:
    """Target log-density of one particle's sampled frame transition, proposal excluded.

    This is the motion-dependent part of ``log w`` that the gradient estimator
    differentiates: the joint transition density of the sampled objects plus
    the emission density of the frame under the sampled objects.
    """
    clusters = cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd)
    assignment = [None] * len(frame.anchors)
    for j, c in enumerate(record.new_clusters):
        for a in clusters[c].anchor_indices:
            assignment[a] = j
    return float(
        joint_transition_log_prob(record.prev_objects, record.new_objects, record.association, params)
        + joint_emission_log_prob(frame.anchors, clusters, record.new_objects, assignment, params)
    )


def frozen_log_weight_grad(record: PropagationRecord, params: ModelParams) -> MotionParams:
    """Analytic motion gradient of :func:`frozen_log_weight`."""
    if not record.association.matches:
        return MotionParams.from_vector(np.zeros(24))
    x = np.stack([record.prev_objects[i].box for i, _ in record.association.matches])
    y = np.stack([record.new_objects[j].box for _, j in record.association.matches])
    return MotionParams.from_vector(-track_loss(x, y, params.motion)[1])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: int, epoch: int, loss: float, grad_norm: float):
        super().__init__(
            f"training diverged in stage {stage} at epoch {epoch}: loss={loss}, grad_norm={grad_norm}"
        )
        self.stage, self.epoch, self.loss, self.grad_norm = stage, epoch, loss, grad_norm


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    clip_norm: float = 10.0
    plateau_tol: float = 1e-4
    plateau_epochs: int = 5
    max_stage1_epochs: int = 500
    stage2_epochs: int = 20
    num_particles: int = 64
    seed: int = 0


@dataclass
class TrainingData:
    labeled: List[List[LabeledFrame]]  # labeled runs, linked where frame indices are adjacent
    batches: List[SemiSupervisedBatch]  # one per labeled frame, with unlabeled neighbors

    @property
    def num_labeled(self) -> int:
        return sum(len(run) for run in self.labeled)

    @classmethod
    def combine(cls, parts: Sequence["TrainingData"]) -> "TrainingData":
        return cls([r for p in parts for r in p.labeled], [b for p in parts for b in p.batches])

    @property
    def num_unlabeled(self) -> int:
        return sum(len(b.forward_frames) + len(b.backward_frames) for b in self.batches)


@dataclass
class TrainResult:
    params: ModelParams
    stage1_params: ModelParams
    curve: List[tuple]  # (stage, epoch, loss, grad_norm)


def _clip(grad: np.ndarray, limit: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    return grad * (limit / norm) if norm > limit else grad


def _supervised_pairs(data: TrainingData):
    pairs = [labeled_transitions(run) for run in data.labeled]
    xs = [p[0] for p in pairs if p[0].shape[0]]
    ys = [p[1] for p in pairs if p[1].shape[0]]
    if not xs:
        return np.zeros((0, 4)), np.zeros((0, 4))
    return np.concatenate(xs), np.concatenate(ys)


def _batch_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def train(data: TrainingData, params0: ModelParams, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Two-stage training: supervised loss to a plateau, then supervised minus ELBO.

    Only the motion-dependent part of the supervised loss (the tracking term
    over labeled transitions) is evaluated; the emission part is constant in
    the motion parameters and would only mask the plateau test. Losses are
    divided by the number of frames they cover so the fixed step size is
    insensitive to dataset size. Each stage takes clipped gradient steps on
    the motion parameters; the other model parameters stay fixed.
    """
    if data.num_labeled == 0 and not data.batches:
        raise ValueError("training data is empty")
    curve: List[tuple] = []
    params = params0
    xs, ys = _supervised_pairs(data)
    scale1 = 1.0 / max(data.num_labeled, 1)

    history: List[float] = []
    for epoch in range(config.max_stage1_epochs if xs.shape[0] else 0):
        loss, grad = track_loss(xs, ys, params.motion)
        loss, grad = loss * scale1, grad * scale1
        gnorm = float(np.linalg.norm(grad))
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            raise TrainingDiverged(1, epoch, loss, gnorm)
        curve.append((1, epoch, loss, gnorm))
        history.append(loss)
        if len(history) > config.plateau_epochs:
            old = history[-1 - config.plateau_epochs]
            if abs(old - loss) <= config.plateau_tol * max(abs(old), 1e-12):
                break
        params = _apply(params, grad, config)
    stage1 = params

    unlabeled = data.num_unlabeled
    if unlabeled == 0:
        return TrainResult(params, stage1, curve)
    scale2 = 1.0 / (max(data.num_labeled, 1) + unlabeled)
    for epoch in range(config.stage2_epochs):
        loss, grad = track_loss(xs, ys, params.motion)
        for b, batch in enumerate(data.batches):
            rep = elbo_estimate(batch, params, config.num_particles, _batch_seed(config.seed, epoch, b))
            loss -= rep.elbo - rep.supervised
            grad -= rep.gradient.to_vector()
        loss, grad = loss * scale2, grad * scale2
        gnorm = float(np.linalg.norm(grad))
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            raise TrainingDiverged(2, epoch, loss, gnorm)
        curve.append((2, epoch, loss, gnorm))
        params = _apply(params, grad, config)
    return TrainResult(params, stage1, curve)


def _apply(params: ModelParams, grad: np.ndarray, config: TrainConfig) -> ModelParams:
    step_vec = config.learning_rate * _clip(grad, config.clip_norm)
    return params.replace(motion=MotionParams.from_vector(params.motion.to_vector() - step_vec))


def build_training_data(frames: Sequence[FrameObservations], truth: Sequence[Sequence], label_fraction: float,
                        horizon: int, rng: np.random.Generator) -> TrainingData:
    """Label a random subset of frames and surround each with unlabeled neighbors.

    ``max(1, round(label_fraction * T))`` frames are labeled. Adjacent labeled
    frames form linked runs for the supervised loss; every labeled frame also
    anchors one batch with up to ``horizon`` neighbors on each side.
    """
    n = len(frames)
    if n == 0:
        return TrainingData([], [])
    if len(truth) != n:
        raise ValueError("frames and truth differ in length")
    k = min(n, max(1, int(round(label_fraction * n))))
    chosen = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    runs: List[List[LabeledFrame]] = []
    for i in chosen:
        item = LabeledFrame(frames[i], list(truth[i]))
        if runs and runs[-1][-1].frame.frame_index == frames[i].frame_index - 1:
            runs[-1].append(item)
        else:
            runs.append([item])
    batches = [SemiSupervisedBatch.around(frames, truth[i], i, horizon) for i in chosen]
    return TrainingData(runs, batches)
