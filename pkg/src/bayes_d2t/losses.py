"""Supervised detect-and-track loss on fully annotated frames.

The loss is the negative joint log-density of a labeled sequence (emissions
plus transitions) with the ``2 log 2 pi`` normalizer of each matched motion
term dropped. Only the motion parameters receive gradients; the tracking part
for one matched pair is

    0.5 * sum_d (y_d - (A x + b)_d)^2 exp(-2 s_d) + sum_d s_d.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .assignment import solve_assignment
from .clustering import FrameObservations, cluster_anchors, iou_matrix
from .model import (
    LOG_2PI,
    AssociationResult,
    Cluster,
    ModelParams,
    MotionParams,
    ObjectState,
    joint_emission_log_prob,
    joint_transition_log_prob,
)

LABEL_IOU = 0.5  # cluster-to-label overlap needed to call a cluster real


@dataclass
class LabeledFrame:
    frame: FrameObservations
    objects: List[ObjectState]

    def __post_init__(self):
        for obj in self.objects:
            if obj.track_id is None:
                raise ValueError(
                    f"labeled frame {self.frame.frame_index} has an object without a track id"
                )
        ids = [o.track_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"labeled frame {self.frame.frame_index} repeats a track id")


def label_assignment(frame: FrameObservations, objects: Sequence[ObjectState], params: ModelParams,
                     clusters: Optional[List[Cluster]] = None):
    """Attribute anchors to labeled objects through their clusters.

    Clusters are matched one-to-one to labels by Hungarian matching on IoU;
    pairs below ``LABEL_IOU`` are rejected. Anchors of matched clusters belong
    to the label, all other anchors are clutter. Returns ``(clusters, assignment)``.
    """
    if clusters is None:
        clusters = cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd)
    assignment: List[Optional[int]] = [None] * len(frame.anchors)
    if clusters and objects:
        ov = iou_matrix(np.stack([c.mean for c in clusters]), np.stack([o.box for o in objects]))
        rows, cols = solve_assignment(ov, maximize=True)
        for r, c in zip(rows, cols):
            if ov[r, c] >= LABEL_IOU:
                for j in clusters[r].anchor_indices:
                    assignment[j] = int(c)
    return clusters, assignment


def track_loss(prev_boxes: np.ndarray, new_boxes: np.ndarray, motion: MotionParams,
               weights: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Weighted tracking loss over matched pairs and its gradient as a 24-vector.

    The gradient is ordered like :meth:`MotionParams.to_vector` (A row-major,
    then b, then s).
    """
    x = np.asarray(prev_boxes, dtype=np.float64).reshape(-1, 4)
    y = np.asarray(new_boxes, dtype=np.float64).reshape(-1, 4)
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    prec = np.exp(-2.0 * motion.s)
    r = y - motion.predict(x)
    loss = float(np.sum(w * (0.5 * (r * r) @ prec + motion.s.sum())))
    wr = (w[:, None] * r) * prec  # weighted precision-scaled residuals
    grad_A = -wr.T @ x
    grad_b = -wr.sum(axis=0)
    grad_s = -(w[:, None] * r * r * prec).sum(axis=0) + w.sum()
    return loss, np.concatenate([grad_A.reshape(-1), grad_b, grad_s])


def matched_pairs(prev: Sequence[ObjectState], new: Sequence[ObjectState]):
    """Association implied by shared track ids."""
    index = {o.track_id: i for i, o in enumerate(prev)}
    matches = [(index[o.track_id], j) for j, o in enumerate(new) if o.track_id in index]
    mp = {m[0] for m in matches}
    mn = {m[1] for m in matches}
    return AssociationResult(
        matches=sorted(matches),
        unmatched_new=[j for j in range(len(new)) if j not in mn],
        unmatched_prev=[i for i in range(len(prev)) if i not in mp],
    )


def labeled_transitions(sequence: Sequence[LabeledFrame]) -> Tuple[np.ndarray, np.ndarray]:
    """Matched (previous box, next box) pairs of a labeled sequence, linked as in :func:`supervised_loss`."""
    xs, ys = [], []
    prev: Optional[LabeledFrame] = None
    for item in sequence:
        if prev is not None and item.frame.frame_index == prev.frame.frame_index + 1:
            for i, j in matched_pairs(prev.objects, item.objects).matches:
                xs.append(prev.objects[i].box)
                ys.append(item.objects[j].box)
        prev = item
    if not xs:
        return np.zeros((0, 4)), np.zeros((0, 4))
    return np.stack(xs), np.stack(ys)


def supervised_loss(sequence: Sequence[LabeledFrame], params: ModelParams) -> Tuple[float, MotionParams]:
    """Negative joint log-density of labeled frames and its motion gradient.

    Consecutive entries whose frame indices differ by one are linked through
    their track ids; any other entry starts a fresh run whose objects are all
    births.
    """
    total = 0.0
    grad = np.zeros(24)
    prev: Optional[LabeledFrame] = None
    for item in sequence:
        if not isinstance(item, LabeledFrame):
            raise TypeError("supervised_loss expects LabeledFrame items")
        clusters, assignment = label_assignment(item.frame, item.objects, params)
        total -= joint_emission_log_prob(item.frame.anchors, clusters, item.objects, assignment, params)
        linked = prev is not None and item.frame.frame_index == prev.frame.frame_index + 1
        before = prev.objects if linked else []
        assoc = matched_pairs(before, item.objects)
        total -= joint_transition_log_prob(before, item.objects, assoc, params)
        if assoc.matches:
            x = np.stack([before[i].box for i, _ in assoc.matches])
            y = np.stack([item.objects[j].box for _, j in assoc.matches])
            total -= 2.0 * LOG_2PI * len(assoc.matches)
            grad += track_loss(x, y, params.motion)[1]
        prev = item
    return float(total), MotionParams.from_vector(grad)
