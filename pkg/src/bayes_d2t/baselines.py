"""Ablation baselines: NMS detector, frame-level Bayesian fusion and three linkers.

Every method returns one list of :class:`~bayes_d2t.io.ObjectRecord` per frame,
the same serialization the particle filter uses, so all of them go through the
same metric code.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .assignment import solve_assignment
from .clustering import FrameObservations, anchor_score, cluster_anchors, iou_matrix
from .io import ObjectRecord
from .model import ModelParams, MotionParams

DetectionFrames = List[List[ObjectRecord]]


class BaselineKind(enum.Enum):
    SingleDetector = "single"
    FrameBayesian = "frame-bayes"
    GreedyLink = "greedy"
    GreedyOffsetLink = "greedy-offset"
    KalmanLink = "kalman"


def single_detector(frame: FrameObservations, iou_threshold: float = 0.5,
                    min_appearance: float = 0.0) -> List[ObjectRecord]:
    """Greedy NMS over anchors; confidence is appearance times the best class score.

    Anchors with appearance below ``min_appearance`` are discarded first.
    Kept detections are numbered in order of decreasing score.
    """
    anchors = [a for a in frame.anchors if a.appearance >= min_appearance]
    if not anchors:
        return []
    scores = np.array([anchor_score(a) for a in anchors])
    boxes = np.stack([a.box for a in anchors])
    order = sorted(range(len(anchors)), key=lambda j: (-scores[j], j))
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(anchors), dtype=bool)
    out = []
    for j in order:
        if suppressed[j]:
            continue
        suppressed |= overlaps[j] > iou_threshold
        a = anchors[j]
        out.append(ObjectRecord(len(out), a.box.copy(), int(np.argmax(a.class_scores)),
                                float(scores[j]), None, a.class_scores.copy()))
    return out


def _fuse_with_prior(mean, scatter, count, params: ModelParams):
    prior_prec = np.linalg.inv(params.prior_cov)
    info = count * np.linalg.inv(scatter)
    cov = np.linalg.inv(prior_prec + info)
    cov = 0.5 * (cov + cov.T)
    return cov @ (prior_prec @ params.prior_mean + info @ mean), cov


def frame_bayesian(frame: FrameObservations, params: ModelParams,
                   min_inclusion: float = 0.5) -> List[ObjectRecord]:
    """Per-cluster new-object posterior with no temporal prior.

    Clusters whose inclusion probability is below ``min_inclusion`` are
    dropped. Confidence is the inclusion probability.
    """
    out = []
    for cl in cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd):
        if cl.inclusion_prob < min_inclusion:
            continue
        mean, cov = _fuse_with_prior(cl.mean, cl.scatter, cl.count, params)
        out.append(ObjectRecord(len(out), mean, int(np.argmax(cl.fused_class)),
                                float(cl.inclusion_prob), cov, cl.fused_class.copy()))
    return out


def _link(frames: Sequence[Sequence[ObjectRecord]], predict, iou_min: float) -> DetectionFrames:
    out: DetectionFrames = []
    prev: List[ObjectRecord] = []
    next_id = 0
    for dets in frames:
        ids = [-1] * len(dets)
        if prev and dets:
            pred = predict(np.stack([p.box for p in prev]))
            ov = iou_matrix(pred, np.stack([d.box for d in dets]))
            rows, cols = solve_assignment(ov, maximize=True)
            for r, c in zip(rows, cols):
                if ov[r, c] >= iou_min:
                    ids[c] = prev[r].track_id
        linked = []
        for d, tid in zip(dets, ids):
            if tid < 0:
                tid, next_id = next_id, next_id + 1
            linked.append(ObjectRecord(tid, d.box, d.class_id, d.confidence, d.cov, d.class_probs))
        out.append(linked)
        prev = linked
    return out


def greedy_link(det_frames: Sequence[Sequence[ObjectRecord]], iou_min: float = 0.3) -> DetectionFrames:
    """Frame-to-frame Hungarian matching on plain IoU; unmatched detections start tracks."""
    return _link(det_frames, lambda boxes: boxes, iou_min)


def greedy_offset_link(det_frames: Sequence[Sequence[ObjectRecord]], motion: MotionParams,
                       iou_min: float = 0.3) -> DetectionFrames:
    """As :func:`greedy_link` but against motion-predicted previous boxes."""
    return _link(det_frames, motion.predict, iou_min)


@dataclass
class _KalmanTrack:
    track_id: int
    mean: np.ndarray
    cov: np.ndarray
    class_logp: np.ndarray


def kalman_predict(mean, cov, motion: MotionParams):
    return motion.predict(mean), motion.A @ cov @ motion.A.T + np.diag(motion.var)


def kalman_update(mean, cov, obs_mean, obs_cov):
    """Standard Kalman correction with an identity measurement map."""
    gain = cov @ np.linalg.inv(cov + obs_cov)
    post = cov - gain @ cov
    return mean + gain @ (obs_mean - mean), 0.5 * (post + post.T)


def kalman_link(frames: Sequence[FrameObservations], params: ModelParams,
                min_inclusion: float = 0.5) -> DetectionFrames:
    """Per-track Kalman filters fed with cluster means.

    The process model is the motion model, the measurement noise of a cluster
    with ``M`` anchors and scatter ``S`` is ``S / M``. Tracks are associated by
    Hungarian matching on the IoU between predicted and cluster means, gated at
    ``params.iou_min``; unmatched tracks end and unmatched clusters start new
    tracks from the prior-fused posterior.
    """
    motion = params.motion
    tracks: List[_KalmanTrack] = []
    next_id = 0
    out: DetectionFrames = []
    for frame in frames:
        clusters = [
            cl for cl in cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd)
            if cl.inclusion_prob >= min_inclusion
        ]
        preds = [kalman_predict(t.mean, t.cov, motion) for t in tracks]
        owner = [-1] * len(clusters)
        if preds and clusters:
            ov = iou_matrix(np.stack([p[0] for p in preds]), np.stack([c.mean for c in clusters]))
            rows, cols = solve_assignment(ov, maximize=True)
            for r, c in zip(rows, cols):
                if ov[r, c] >= params.iou_min:
                    owner[c] = r
        new_tracks, records = [], []
        with np.errstate(divide="ignore"):
            for c, cl in enumerate(clusters):
                log_fused = np.log(cl.fused_class)
                if owner[c] >= 0:
                    old = tracks[owner[c]]
                    mean, cov = kalman_update(*preds[owner[c]], cl.mean, cl.scatter / cl.count)
                    acc = old.class_logp + log_fused
                    track = _KalmanTrack(old.track_id, mean, cov, acc - logsumexp(acc))
                else:
                    mean, cov = _fuse_with_prior(cl.mean, cl.scatter, cl.count, params)
                    track = _KalmanTrack(next_id, mean, cov, log_fused)
                    next_id += 1
                new_tracks.append(track)
                probs = np.exp(track.class_logp)
                probs /= probs.sum()
                records.append(ObjectRecord(track.track_id, track.mean, int(np.argmax(probs)),
                                            float(cl.inclusion_prob), track.cov, probs))
        tracks = new_tracks
        out.append(records)
    return out


def run_baseline(kind: BaselineKind, frames: Sequence[FrameObservations], params: ModelParams,
                 min_score: float = 0.5) -> DetectionFrames:
    """Run one baseline over a sequence with a shared detection threshold."""
    if kind is BaselineKind.SingleDetector:
        return [single_detector(f, params.cluster_iou, min_score) for f in frames]
    if kind is BaselineKind.FrameBayesian:
        return [frame_bayesian(f, params, min_score) for f in frames]
    if kind is BaselineKind.GreedyLink:
        return greedy_link([single_detector(f, params.cluster_iou, min_score) for f in frames], params.iou_min)
    if kind is BaselineKind.GreedyOffsetLink:
        dets = [single_detector(f, params.cluster_iou, min_score) for f in frames]
        return greedy_offset_link(dets, params.motion, params.iou_min)
    if kind is BaselineKind.KalmanLink:
        return kalman_link(frames, params, min_score)
    raise ValueError(f"unknown baseline {kind!r}")


def kalman_log_evidence(observations: Sequence[np.ndarray], init_mean, init_cov, motion: MotionParams,
                        obs_cov) -> float:
    """Exact log p(y_0, ..., y_T) for x_0 ~ N(init), x_t = A x_{t-1} + b + noise, y_t = x_t + v."""
    mean = np.asarray(init_mean, dtype=np.float64)
    cov = np.asarray(init_cov, dtype=np.float64)
    obs_cov = np.asarray(obs_cov, dtype=np.float64)
    total = 0.0
    for t, y in enumerate(observations):
        if t > 0:
            mean, cov = kalman_predict(mean, cov, motion)
        total += float(multivariate_normal(mean, cov + obs_cov).logpdf(np.asarray(y, dtype=np.float64)))
        mean, cov = kalman_update(mean, cov, y, obs_cov)
    return total
