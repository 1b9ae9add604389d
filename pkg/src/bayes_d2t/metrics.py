"""Detection metrics: mAP at an IoU threshold and the probabilistic PDQ score.

PDQ treats a detection as a probabilistic box: each corner is Gaussian and the
probability that a point ``(u, v)`` lies inside the box is

    P(u, v) = P(x1 <= u) P(x2 >= u) P(y1 <= v) P(y2 >= v)

using the x and y marginals of the two corners. Spatial quality is
``exp(-(fg + bg))`` where ``fg`` is the mean of ``-log P`` over the ground-truth
box and ``bg`` is the integral of ``-log(1 - P)`` outside it, divided by the
ground-truth area. An exact detection with zero covariance scores 1; spread
put outside the true box, or missing inside it, lowers the score.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_ndtr

from .assignment import solve_assignment
from .clustering import iou_matrix
from .model import ObjectState

_CELLS = 48  # grid cells per segment along each axis
_REACH = 8.0  # corner standard deviations covered beyond the boxes
_LOG_FLOOR = -745.0  # log of the smallest positive double


@dataclass(frozen=True, eq=False)
class ProbDetection:
    """Probabilistic detection: Gaussian corners and a class distribution."""

    corner_means: Tuple[np.ndarray, np.ndarray]
    corner_covs: Tuple[np.ndarray, np.ndarray]
    class_probs: np.ndarray
    score: float = 1.0  # ranking confidence for mAP

    def __post_init__(self):
        means = tuple(np.asarray(m, dtype=np.float64).reshape(2) for m in self.corner_means)
        covs = []
        for c in self.corner_covs:
            c = np.asarray(c, dtype=np.float64).reshape(2, 2)
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(0.5 * (c + c.T)).min() < 0:
                raise ValueError("corner covariances must be symmetric positive semi-definite")
            covs.append(0.5 * (c + c.T))
        probs = np.asarray(self.class_probs, dtype=np.float64).reshape(-1)
        if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("class_probs must lie on the probability simplex")
        object.__setattr__(self, "corner_means", means)
        object.__setattr__(self, "corner_covs", tuple(covs))
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "score", float(self.score))

    @property
    def box(self) -> np.ndarray:
        return np.concatenate(self.corner_means)

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def corner_std(self) -> np.ndarray:
        """Marginal standard deviations in (x1, y1, x2, y2) order."""
        c1, c2 = self.corner_covs
        return np.sqrt(np.array([c1[0, 0], c1[1, 1], c2[0, 0], c2[1, 1]]))

    @classmethod
    def from_box(cls, box, cov, class_probs, score: float = 1.0) -> "ProbDetection":
        """Build from a corner-form box and a 4x4 covariance (or a scalar variance)."""
        box = np.asarray(box, dtype=np.float64).reshape(4)
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(4)
        cov = cov.reshape(4, 4)
        return cls(
            (box[:2], box[2:]),
            (cov[:2, :2], cov[2:, 2:]),
            class_probs,
            score,
        )


# ---------------------------------------------------------------------------
# PDQ
# ---------------------------------------------------------------------------


def _axis_grid(gt_lo, gt_hi, lo, hi, cells=_CELLS):
    """Cell midpoints/widths on [lo, hi] with edges at the GT borders; inside mask."""
    pieces = []
    for a, b, inside in ((lo, gt_lo, False), (gt_lo, gt_hi, True), (gt_hi, hi, False)):
        if b > a:
            edges = np.linspace(a, b, cells + 1)
            pieces.append((0.5 * (edges[1:] + edges[:-1]), np.diff(edges), np.full(cells, inside)))
    mid, width, inside = (np.concatenate(p) for p in zip(*pieces))
    return mid, width, inside


def _log_upper(u, mean, std):
    """log P(corner <= u) for a Gaussian corner (a step when std is 0)."""
    if std > 0:
        return log_ndtr((u - mean) / std)
    return np.where(u >= mean, 0.0, -np.inf)


def _log_lower(u, mean, std):
    """log P(corner >= u)."""
    if std > 0:
        return log_ndtr((mean - u) / std)
    return np.where(u <= mean, 0.0, -np.inf)


def _spatial_exponent(gt, mu, sd, lo, hi, cells):
    """fg + bg on a grid with ``cells`` midpoint cells per segment; inf if the quality is 0."""
    with np.errstate(divide="ignore"):
        axes = []
        for d in range(2):
            u, w, inside = _axis_grid(gt[d], gt[d + 2], lo[d], hi[d], cells)
            logp = _log_upper(u, mu[d], sd[d]) + _log_lower(u, mu[d + 2], sd[d + 2])
            axes.append((u, w, inside, logp))
    (_, wx, ix, lx), (_, wy, iy, ly) = axes
    area = (gt[2] - gt[0]) * (gt[3] - gt[1])

    # foreground: -log P is separable inside the GT box
    if np.any(np.isneginf(lx[ix])) or np.any(np.isneginf(ly[iy])):
        return np.inf
    wxi, wyi = wx[ix], wy[iy]
    fg = -(wyi.sum() * np.dot(wxi, lx[ix]) + wxi.sum() * np.dot(wyi, ly[iy])) / area

    # background: -log(1 - P) over the grid cells outside the GT box
    logp = np.maximum(lx[:, None] + ly[None, :], _LOG_FLOOR)
    outside = ~(ix[:, None] & iy[None, :])
    with np.errstate(divide="ignore"):
        bg_cells = -np.log1p(-np.exp(logp))
    weights = wx[:, None] * wy[None, :]
    bg_sel = bg_cells[outside]
    if np.any(np.isinf(bg_sel)):
        return np.inf
    bg = float(np.sum(weights[outside] * bg_sel)) / area
    return float(fg + bg)


def spatial_quality(det: ProbDetection, gt_box) -> float:
    """Foreground/background spatial quality of one detection against one box, in [0, 1].

    The midpoint rule is second order in the cell width, so one Richardson
    step on a half-resolution grid removes the leading error term.
    """
    gt = np.asarray(gt_box, dtype=np.float64).reshape(4)
    mu = det.box
    sd = det.corner_std
    reach = _REACH * sd
    lo = np.minimum(gt[:2], np.minimum(mu[:2] - reach[:2], mu[2:] - reach[2:]))
    hi = np.maximum(gt[2:], np.maximum(mu[:2] + reach[:2], mu[2:] + reach[2:]))
    fine = _spatial_exponent(gt, mu, sd, lo, hi, _CELLS)
    if not np.isfinite(fine):
        return 0.0
    coarse = _spatial_exponent(gt, mu, sd, lo, hi, _CELLS // 2)
    exponent = (4.0 * fine - coarse) / 3.0 if np.isfinite(coarse) else fine
    return float(np.exp(-max(exponent, 0.0)))


def label_quality(det: ProbDetection, gt: ObjectState) -> float:
    if gt.class_id >= det.class_probs.shape[0]:
        return 0.0
    return float(det.class_probs[gt.class_id])


def pdq_pairwise(det: ProbDetection, gt: ObjectState) -> float:
    """Geometric mean of spatial and label quality."""
    lab = label_quality(det, gt)
    if lab <= 0.0:
        return 0.0
    return float(np.sqrt(spatial_quality(det, gt.box) * lab))


def pdq_matrix(dets: Sequence[ProbDetection], gts: Sequence[ObjectState]) -> np.ndarray:
    """Pairwise quality, rows = ground truth, columns = detections."""
    out = np.zeros((len(gts), len(dets)))
    for i, g in enumerate(gts):
        for j, d in enumerate(dets):
            out[i, j] = pdq_pairwise(d, g)
    return out


@dataclass(frozen=True)
class PdqStats:
    quality_sum: float
    tp: int
    fp: int
    fn: int

    @property
    def score(self) -> float:
        total = self.tp + self.fp + self.fn
        return 1.0 if total == 0 else self.quality_sum / total


def pdq_frame_stats(dets: Sequence[ProbDetection], gts: Sequence[ObjectState]) -> PdqStats:
    if not dets or not gts:
        return PdqStats(0.0, 0, len(dets), len(gts))
    q = pdq_matrix(dets, gts)
    rows, cols = solve_assignment(q, maximize=True)
    vals = q[rows, cols]
    tp = int(np.count_nonzero(vals > 0.0))
    return PdqStats(float(vals.sum()), tp, len(dets) - tp, len(gts) - tp)


def pdq_frame(dets: Sequence[ProbDetection], gts: Sequence[ObjectState]) -> float:
    """Sum of optimally assigned pairwise qualities over TP + FP + FN (1 when both empty)."""
    return pdq_frame_stats(dets, gts).score


def pdq_sequence(det_frames, gt_frames) -> float:
    """Mean of per-frame PDQ over a sequence."""
    if len(det_frames) != len(gt_frames):
        raise ValueError("detection and ground-truth sequences differ in length")
    if not gt_frames:
        return 1.0
    return float(np.mean([pdq_frame(d, g) for d, g in zip(det_frames, gt_frames)]))


# ---------------------------------------------------------------------------
# mAP
# ---------------------------------------------------------------------------


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_ap(cls, det_frames, gt_frames, iou_threshold):
    gt_boxes = []
    n_gt = 0
    for gts in gt_frames:
        boxes = np.array([g.box for g in gts if g.class_id == cls]).reshape(-1, 4)
        gt_boxes.append(boxes)
        n_gt += boxes.shape[0]
    if n_gt == 0:
        return None
    entries = [
        (-d.score, t, j, d.box)
        for t, dets in enumerate(det_frames)
        for j, d in enumerate(dets)
        if d.class_id == cls
    ]
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    used = [np.zeros(b.shape[0], dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(entries))
    for i, (_, t, _, box) in enumerate(entries):
        boxes = gt_boxes[t]
        if boxes.shape[0] == 0:
            continue
        ov = iou_matrix(box[None, :], boxes)[0]
        best = int(np.argmax(ov))
        if ov[best] >= iou_threshold and not used[t][best]:
            used[t][best] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).tiny)
    return interpolated_ap(recall, precision)


def average_precision(det_frames: Sequence[Sequence[ProbDetection]],
                      gt_frames: Sequence[Sequence[ObjectState]],
                      iou_threshold: float = 0.5,
                      num_classes: Optional[int] = None) -> Tuple[Dict[int, float], float]:
    """Per-class AP and their mean; classes without ground truth are left out.

    Detections are ranked by ``score`` and each is matched to the highest-IoU
    ground truth of its class in its frame; a match needs IoU >= threshold and
    an unclaimed ground truth. Returns ``(per_class, mAP)``; mAP is NaN when no
    class has ground truth.
    """
    if len(det_frames) != len(gt_frames):
        raise ValueError("detection and ground-truth sequences differ in length")
    classes = set()
    for gts in gt_frames:
        classes.update(g.class_id for g in gts)
    if num_classes is not None:
        classes &= set(range(num_classes))
    per_class = {}
    for cls in sorted(classes):
        ap = _class_ap(cls, det_frames, gt_frames, iou_threshold)
        if ap is not None:
            per_class[cls] = ap
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean
