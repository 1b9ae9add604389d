"""Greedy IoU clustering of anchors into object candidates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.special import logsumexp

from .model import AnchorObservation, Cluster


@dataclass
class FrameObservations:
    frame_index: int
    anchors: List[AnchorObservation] = field(default_factory=list)

    def __post_init__(self):
        if int(self.frame_index) < 0:
            raise ValueError("frame_index must be non-negative")
        self.frame_index = int(self.frame_index)


def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box stacks of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def anchor_score(anchor: AnchorObservation) -> float:
    """Non-background score used to pick cluster centers."""
    return anchor.appearance * float(np.max(anchor.class_scores))


def cluster_statistics(anchors: Sequence[AnchorObservation], alpha: float, eps_pd: float):
    """Fused box mean, scatter, class distribution and inclusion probability.

    Returns ``(mean, scatter, fused_class, inclusion_prob)`` plus the log-space
    sufficient statistics ``(log_class_lik, log_real, log_clutter)``.
    """
    if len(anchors) == 0:
        raise ValueError("a cluster needs at least one anchor")
    boxes = np.stack([a.box for a in anchors])
    m = boxes.shape[0]
    mean = boxes.mean(axis=0)
    scatter = (alpha / m) * (boxes.T @ boxes) - alpha * np.outer(mean, mean)
    scatter = 0.5 * (scatter + scatter.T) + eps_pd * np.eye(4)
    # the raw scatter is PSD in exact arithmetic; clip rounding noise below the ridge
    w, v = np.linalg.eigh(scatter)
    if w.min() < eps_pd:
        scatter = (v * np.maximum(w, eps_pd)) @ v.T
        scatter = 0.5 * (scatter + scatter.T)

    with np.errstate(divide="ignore"):
        log_k = np.log(np.stack([a.class_scores for a in anchors]))
    if alpha == 0.0:
        log_class_lik = np.zeros(log_k.shape[1])
    else:
        log_class_lik = alpha * log_k.sum(axis=0)
    fused = np.exp(log_class_lik - logsumexp(log_class_lik))

    e = np.array([a.appearance for a in anchors])
    log_real = alpha * float(np.sum(np.log(e)))
    log_clutter = alpha * float(np.sum(np.log1p(-e)))
    inclusion = float(np.exp(log_real - np.logaddexp(log_real, log_clutter)))
    return mean, scatter, fused, inclusion, log_class_lik, log_real, log_clutter


def cluster_anchors(
    frame: FrameObservations,
    iou_threshold: float = 0.5,
    alpha: float = 1.0,
    eps_pd: float = 1e-6,
) -> List[Cluster]:
    """Greedy NMS-style clustering; every anchor lands in exactly one cluster.

    Centers are taken in order of decreasing :func:`anchor_score`; ties break
    toward the lower anchor index.
    """
    anchors = frame.anchors
    if not anchors:
        return []
    scores = np.array([anchor_score(a) for a in anchors])
    boxes = np.stack([a.box for a in anchors])
    order = sorted(range(len(anchors)), key=lambda j: (-scores[j], j))
    overlaps = iou_matrix(boxes, boxes)
    assigned = np.zeros(len(anchors), dtype=bool)
    clusters = []
    for center in order:
        if assigned[center]:
            continue
        members = [center] + [
            j for j in order if j != center and not assigned[j] and overlaps[center, j] > iou_threshold
        ]
        assigned[members] = True
        group = [anchors[j] for j in members]
        mean, scatter, fused, incl, lcl, lr, lc = cluster_statistics(group, alpha, eps_pd)
        clusters.append(
            Cluster(
                anchor_indices=tuple(members),
                mean=mean,
                scatter=scatter,
                count=len(members),
                fused_class=fused,
                inclusion_prob=incl,
                log_class_lik=lcl,
                log_real=lr,
                log_clutter=lc,
            )
        )
    return clusters
