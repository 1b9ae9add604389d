"""Independent reference computations used by the test suite.

Every function here recomputes a quantity along a different code path from
the library: dense numeric quadrature, exhaustive enumeration, textbook
multivariate normal densities from scipy, or an exact Kalman filter.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from bayes_d2t.baselines import kalman_log_evidence
from bayes_d2t.clustering import FrameObservations, cluster_anchors, iou
from bayes_d2t.model import (
    AnchorObservation,
    ModelParams,
    MotionParams,
    appearance_emission_log_prob,
    class_emission_log_prob,
    clutter_cluster_log_marginal,
    joint_emission_log_prob,
    joint_transition_log_prob,
    log_poisson,
)

# ---------------------------------------------------------------------------
# random SPD matrices and boxes
# ---------------------------------------------------------------------------


def random_spd(rng, scale=1.0, dim=4):
    q = rng.standard_normal((dim, dim))
    return scale * (q @ q.T / dim + 0.2 * np.eye(dim))


def random_box(rng, center_scale=10.0, size=(2.0, 10.0)):
    x, y = rng.normal(0.0, center_scale, 2)
    w, h = rng.uniform(*size, 2)
    return np.array([x, y, x + w, y + h])


# ---------------------------------------------------------------------------
# quadrature oracle for conjugate Gaussian fusion
# ---------------------------------------------------------------------------


def quadrature_directional_moments(log_density, center, direction, half_width, points=100_001):
    """Mean offset and variance of ``t`` under ``exp(log_density(center + t * direction))``.

    The unnormalized log-density is evaluated on a uniform grid and integrated
    with the trapezoid rule.
    """
    t = np.linspace(-half_width, half_width, points)
    x = center[None, :] + t[:, None] * direction[None, :]
    logp = log_density(x)
    w = np.exp(logp - logp.max())
    z = np.trapezoid(w, t)
    m = np.trapezoid(w * t, t) / z
    v = np.trapezoid(w * (t - m) ** 2, t) / z
    return m, v


def gaussian_product_log_density(prior_mean, prior_cov, anchor_boxes, scatter):
    """Unnormalized log of N(x; prior) * prod_j N(a_j; x, scatter), vectorized over rows of x.

    Each factor is a quadratic form with a dense inverse; constants are
    dropped because only normalized moments are taken.
    """
    terms = [(np.asarray(prior_mean, dtype=float), np.linalg.inv(prior_cov))]
    scatter_prec = np.linalg.inv(scatter)
    terms += [(np.asarray(a, dtype=float), scatter_prec) for a in anchor_boxes]

    # expand the summed quadratic forms once: -0.5 x'Hx + x'h
    H = sum(prec for _, prec in terms)
    h = sum(prec @ center for center, prec in terms)

    def logp(x):
        return -0.5 * np.sum((x @ H) * x, axis=1) + x @ h

    return logp


def check_posterior_by_quadrature(mean, cov, log_density):
    """Largest absolute error between (mean, cov) and quadrature along axes and axis pairs.

    Along a unit-free direction ``u`` through the claimed mean, the conditional
    of a Gaussian posterior has mean offset 0 and variance 1 / (u' P u) with
    ``P = cov^-1``. The four axes and the six axis-pair sums determine ``P``
    completely, and the mean offset checks the claimed mean per dimension.
    """
    prec = np.linalg.inv(cov)
    dirs = [np.eye(4)[d] for d in range(4)]
    dirs += [np.eye(4)[i] + np.eye(4)[j] for i, j in itertools.combinations(range(4), 2)]
    worst = 0.0
    for u in dirs:
        sd = 1.0 / math.sqrt(u @ prec @ u)
        half = 8.0 * max(sd, 1e-12)
        m, v = quadrature_directional_moments(log_density, mean, u, half)
        worst = max(worst, abs(m) * float(np.max(np.abs(u))), abs(v - sd * sd))
    return worst


# ---------------------------------------------------------------------------
# density-ratio weight oracle
# ---------------------------------------------------------------------------


def direct_log_weight(record, frame: FrameObservations, params: ModelParams) -> float:
    """log target increment minus log proposal density of one particle's choices.

    Target: full joint transition and emission densities from the core model.
    Proposal: inclusion Bernoullis, class draws of unmatched objects, and the
    Gaussian posteriors written from scratch with dense inverses.
    """
    clusters = cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd)
    assignment = [None] * len(frame.anchors)
    for j, c in enumerate(record.new_clusters):
        for a in clusters[c].anchor_indices:
            assignment[a] = j
    target = joint_transition_log_prob(record.prev_objects, record.new_objects, record.association, params)
    target += joint_emission_log_prob(frame.anchors, clusters, record.new_objects, assignment, params)

    proposal = 0.0
    for i, cl in enumerate(clusters):
        proposal += math.log(cl.inclusion_prob) if record.included[i] else math.log1p(-cl.inclusion_prob)
    matched = {n: p for p, n in record.association.matches}
    d_inv = np.diag(np.exp(-2.0 * params.motion.s))
    p0 = np.linalg.inv(params.prior_cov)
    for j, obj in enumerate(record.new_objects):
        cl = clusters[record.new_clusters[j]]
        info = cl.count * np.linalg.inv(cl.scatter)
        if j in matched:
            m = params.motion.predict(record.prev_objects[matched[j]].box)
            cov = np.linalg.inv(d_inv + info)
            mu = cov @ (d_inv @ m + info @ cl.mean)
        else:
            cov = np.linalg.inv(p0 + info)
            mu = cov @ (p0 @ params.prior_mean + info @ cl.mean)
            proposal += math.log(cl.fused_class[obj.class_id])
        proposal += multivariate_normal(mu, cov).logpdf(obj.box)
    return float(target - proposal)


def normalized(log_w) -> np.ndarray:
    lw = np.asarray(log_w, dtype=np.float64)
    return np.exp(lw - logsumexp(lw))


# ---------------------------------------------------------------------------
# the single-object linear-Gaussian scenario
# ---------------------------------------------------------------------------

KALMAN_CLASSES = 2
KALMAN_ALPHA = 4.0
KALMAN_MOTION = MotionParams(np.eye(4), np.array([0.5, 0.2, 0.5, 0.2]), np.full(4, math.log(0.5)))
KALMAN_PARAMS = ModelParams(
    lambda_death=0.0, lambda_birth=0.0, alpha=KALMAN_ALPHA, prior_mean=np.array([0.0, 0.0, 20.0, 20.0]),
    prior_cov=4.0 * np.eye(4), num_classes=KALMAN_CLASSES, motion=KALMAN_MOTION, iou_min=0.05, eps_pd=1.0,
)
# one expected birth at frame 0, none afterwards
KALMAN_FIRST = KALMAN_PARAMS.replace(lambda_birth=1.0)


def kalman_scenario(seed: int, frames: int = 20):
    """One object, one anchor per frame; returns (frames, anchor boxes, initial box, class)."""
    p = KALMAN_PARAMS
    rng = np.random.default_rng([seed, 99])
    x = rng.multivariate_normal(p.prior_mean, p.prior_cov)
    cls = int(rng.integers(KALMAN_CLASSES))
    x0 = x.copy()
    out, ys = [], []
    for t in range(frames):
        if t > 0:
            x = KALMAN_MOTION.predict(x) + np.exp(KALMAN_MOTION.s) * rng.standard_normal(4)
        y = x + rng.standard_normal(4) * math.sqrt(p.eps_pd)
        conc = np.ones(KALMAN_CLASSES)
        conc[cls] += KALMAN_ALPHA
        k = np.clip(rng.dirichlet(conc), 1e-12, None)
        k /= k.sum()
        e = float(np.clip(rng.beta(KALMAN_ALPHA + 1.0, 1.0), 1e-12, 1 - 1e-12))
        out.append(FrameObservations(t, [AnchorObservation(y, e, k)]))
        ys.append(y)
    return out, ys, x0, cls


def kalman_scenario_log_evidence(frames, ys) -> float:
    """Exact log-marginal: one object born at frame 0, or a clutter-only sequence."""
    p = KALMAN_PARAMS
    anchors = [f.anchors[0] for f in frames]
    obj = log_poisson(1, 1.0)
    obj += sum(appearance_emission_log_prob(a.appearance, True, p.alpha) for a in anchors)
    obj += logsumexp([
        sum(class_emission_log_prob(a.class_scores, k, p.alpha) for a in anchors) for k in range(KALMAN_CLASSES)
    ]) - math.log(KALMAN_CLASSES)
    obj += kalman_log_evidence(ys, p.prior_mean, p.prior_cov, KALMAN_MOTION, p.eps_pd * np.eye(4))
    clutter = log_poisson(0, 1.0) + sum(
        clutter_cluster_log_marginal([a], p.eps_pd * np.eye(4), p) for a in anchors
    )
    return float(np.logaddexp(obj, clutter))


def kalman_conditional_log_evidence(frames, ys, x0, cls) -> float:
    """Exact log p(frames[1:] | object at x0 with class cls in frame 0)."""
    p = KALMAN_PARAMS
    anchors = [f.anchors[0] for f in frames[1:]]
    total = sum(appearance_emission_log_prob(a.appearance, True, p.alpha) for a in anchors)
    total += sum(class_emission_log_prob(a.class_scores, cls, p.alpha) for a in anchors)
    total += kalman_log_evidence(ys[1:], KALMAN_MOTION.predict(x0), np.diag(KALMAN_MOTION.var), KALMAN_MOTION,
                                 p.eps_pd * np.eye(4))
    return float(total)


# ---------------------------------------------------------------------------
# assignment and detection metrics by enumeration
# ---------------------------------------------------------------------------


def brute_force_best(matrix: np.ndarray, maximize: bool = True) -> float:
    """Best total over all injective row-to-column maps of the smaller side."""
    n, m = matrix.shape
    if n == 0 or m == 0:
        return 0.0
    sign = 1.0 if maximize else -1.0
    best = -math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = max(best, sign * sum(matrix[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = max(best, sign * sum(matrix[r, j] for j, r in enumerate(rows)))
    return sign * best


def brute_force_ap(dets, gts, iou_threshold=0.5):
    """Per-class all-point AP from explicit precision/recall enumeration.

    ``dets`` and ``gts`` are lists over frames of ``(box, class, score)`` and
    ``(box, class)`` tuples. Returns a dict of per-class APs.
    """
    classes = sorted({c for frame in gts for _, c in frame})
    out = {}
    for cls in classes:
        n_gt = sum(1 for frame in gts for _, c in frame if c == cls)
        ranked = sorted(
            ((-s, t, j, b) for t, frame in enumerate(dets) for j, (b, c, s) in enumerate(frame) if c == cls),
            key=lambda e: (e[0], e[1], e[2]),
        )
        claimed = set()
        points = []
        tp = fp = 0
        for _, t, _, box in ranked:
            cands = [(iou(box, b), g) for g, (b, c) in enumerate(gts[t]) if c == cls]
            hit = False
            if cands:
                best_iou = max(v for v, _ in cands)
                best = min(g for v, g in cands if v == best_iou)
                if best_iou >= iou_threshold and (t, best) not in claimed:
                    claimed.add((t, best))
                    hit = True
            tp, fp = tp + hit, fp + (not hit)
            points.append((tp / n_gt, tp / (tp + fp)))
        # all-point interpolation: sum over recall increments of the best precision at or beyond them
        ap = 0.0
        prev_recall = 0.0
        for k, (r, _) in enumerate(points):
            if r > prev_recall:
                ap += (r - prev_recall) * max(p for rr, p in points[k:] if rr >= r)
                prev_recall = r
        out[cls] = ap
    return out


def dense_spatial_quality(mu, sd, gt, reach=8.0, points=1201):
    """Foreground/background spatial quality integrated on a dense 2-D grid.

    ``mu``/``sd`` are corner means and standard deviations in (x1, y1, x2, y2)
    order. No separability is used; cells straddling the box edge are split by
    aligning the grid with the edges.
    """
    from scipy.stats import norm

    lo = np.minimum(gt[:2], np.minimum(mu[:2] - reach * sd[:2], mu[2:] - reach * sd[2:]))
    hi = np.maximum(gt[2:], np.maximum(mu[:2] + reach * sd[:2], mu[2:] + reach * sd[2:]))
    axes = []
    for d in range(2):
        pieces = [np.linspace(lo[d], gt[d], points), np.linspace(gt[d], gt[d + 2], points)[1:],
                  np.linspace(gt[d + 2], hi[d], points)[1:]]
        edges = np.concatenate(pieces)
        mids = 0.5 * (edges[1:] + edges[:-1])
        axes.append((mids, np.diff(edges)))
    (ux, wx), (uy, wy) = axes
    X, Y = np.meshgrid(ux, uy, indexing="ij")
    P = (norm.cdf(X, mu[0], sd[0]) * norm.sf(X, mu[2], sd[2])
         * norm.cdf(Y, mu[1], sd[1]) * norm.sf(Y, mu[3], sd[3]))
    inside = (X > gt[0]) & (X < gt[2]) & (Y > gt[1]) & (Y < gt[3])
    W = wx[:, None] * wy[None, :]
    area = (gt[2] - gt[0]) * (gt[3] - gt[1])
    with np.errstate(divide="ignore"):
        fg = -np.sum(W[inside] * np.log(P[inside])) / area
        bg = -np.sum(W[~inside] * np.log1p(-P[~inside])) / area
    return float(np.exp(-(fg + bg)))


def brute_force_pdq(quality: np.ndarray, tie: float = 0.0) -> set:
    """Frame PDQ values over every assignment whose quality sum is within `tie` of the best.

    Rows are ground truth. Qualities that underflow against larger ones make several
    assignments tie in floating point, each with its own true-positive count, so the
    oracle returns all of the admissible scores.
    """
    n_gt, n_det = quality.shape
    if n_gt == 0 and n_det == 0:
        return {1.0}
    candidates = [(0.0, 0)]
    if n_gt and n_det:
        small, large = (n_gt, n_det) if n_gt <= n_det else (n_det, n_gt)
        candidates = []
        for perm in itertools.permutations(range(large), small):
            pairs = [(i, p) if n_gt <= n_det else (p, i) for i, p in enumerate(perm)]
            vals = [quality[g, d] for g, d in pairs]
            candidates.append((sum(vals), sum(v > 0 for v in vals)))
    best = max(total for total, _ in candidates)
    return {
        total / (n_det + n_gt - tp)
        for total, tp in candidates
        if total >= best - tie
    }
