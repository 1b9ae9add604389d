"""Particle filter over multi-object states with conjugate proposals.

The particle population is stored flat: every object of every particle is one
row of the arrays in :class:`ParticleSet`, tagged with its owning particle.
Per frame the filter

1. clusters the anchors and precomputes every per-cluster quantity that does
   not depend on a particle (fused posteriors, Cholesky factors, baseline),
2. samples inclusion and class for every (particle, cluster) pair at once,
3. associates each particle's sampled objects with its previous objects
   (Hungarian on the log-IoU + log-class affinity, gated by ``iou_min``),
4. samples boxes from the matched / unmatched conjugate posteriors and
   computes closed-form importance weights, vectorized over all rows.

Weights are relative to a per-frame baseline in which every cluster is
clutter; the baseline is identical for all particles and is added back into
``log_marginal_estimate``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .assignment import solve_assignment
from .clustering import FrameObservations, cluster_anchors, iou_matrix
from .model import (
    LOG_2PI,
    AssociationResult,
    Cluster,
    ModelParams,
    MotionParams,
    ObjectState,
    Particle,
    dirichlet_log_norm,
)


class DegenerateParticlesError(RuntimeError):
    def __init__(self, message: str = "degenerate particle set", frame_index: Optional[int] = None):
        if frame_index is not None:
            message = f"{message} at frame {frame_index}"
        super().__init__(message)
        self.frame_index = frame_index


def thread_count(default: int = 1) -> int:
    """Worker count from ``BAYES_D2T_THREADS`` (0 means one per CPU)."""
    raw = os.environ.get("BAYES_D2T_THREADS")
    if raw is None or raw.strip() == "":
        return default
    n = int(raw)
    if n < 0:
        raise ValueError("BAYES_D2T_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# particle storage
# ---------------------------------------------------------------------------


@dataclass
class ParticleSet:
    owner: np.ndarray  # (n,) owning particle of each object row, non-decreasing
    boxes: np.ndarray  # (n, 4) sampled boxes
    means: np.ndarray  # (n, 4) proposal means
    covs: np.ndarray  # (n, 4, 4) proposal covariances
    classes: np.ndarray  # (n,)
    track_ids: np.ndarray  # (n,)
    class_logp: np.ndarray  # (n, K) class posterior along the object's chain
    log_weights: np.ndarray  # (N,) normalized
    ancestors: np.ndarray  # (N,)

    @property
    def num_particles(self) -> int:
        return self.log_weights.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        counts = np.bincount(self.owner, minlength=self.num_particles)
        return np.concatenate([[0], np.cumsum(counts)])

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.num_particles)

    def objects_of(self, l: int) -> List[ObjectState]:
        off = self.offsets
        return [
            ObjectState.sampled(self.boxes[r], int(self.classes[r]), int(self.track_ids[r]))
            for r in range(off[l], off[l + 1])
        ]

    def particle(self, l: int) -> Particle:
        return Particle(self.objects_of(l), float(self.log_weights[l]), int(self.ancestors[l]))

    def select(self, ancestors: np.ndarray) -> "ParticleSet":
        """Copy particles by ancestor index (resampling); weights become uniform."""
        ancestors = np.asarray(ancestors, dtype=np.int64)
        off = self.offsets
        counts = off[ancestors + 1] - off[ancestors]
        rows = np.concatenate(
            [np.arange(off[a], off[a + 1]) for a in ancestors] or [np.zeros(0, dtype=np.int64)]
        ).astype(np.int64)
        n = ancestors.shape[0]
        return ParticleSet(
            owner=np.repeat(np.arange(n), counts),
            boxes=self.boxes[rows],
            means=self.means[rows],
            covs=self.covs[rows],
            classes=self.classes[rows],
            track_ids=self.track_ids[rows],
            class_logp=self.class_logp[rows],
            log_weights=np.full(n, -math.log(n)),
            ancestors=ancestors,
        )

    @classmethod
    def from_objects(cls, num_particles: int, objects: Sequence[ObjectState], num_classes: int) -> "ParticleSet":
        """Every particle holds the same (known) objects; uniform weights."""
        k = len(objects)
        boxes = np.array([o.box for o in objects], dtype=np.float64).reshape(k, 4)
        classes = np.array([o.class_id for o in objects], dtype=np.int64)
        ids = np.array(
            [o.track_id if o.track_id is not None else i for i, o in enumerate(objects)],
            dtype=np.int64,
        )
        logp = np.full((k, num_classes), -np.inf)
        logp[np.arange(k), classes] = 0.0
        N = num_particles
        return cls(
            owner=np.repeat(np.arange(N), k),
            boxes=np.tile(boxes, (N, 1)),
            means=np.tile(boxes, (N, 1)),
            covs=np.zeros((N * k, 4, 4)),
            classes=np.tile(classes, N),
            track_ids=np.tile(ids, N),
            class_logp=np.tile(logp, (N, 1)),
            log_weights=np.full(N, -math.log(N)),
            ancestors=np.arange(N),
        )


@dataclass
class TransitionRecord:
    """Matched (ancestor box -> sampled box) pairs of one frame, for learning."""

    owner: np.ndarray
    prev_boxes: np.ndarray
    new_boxes: np.ndarray


@dataclass
class PropagationRecord:
    """Everything one particle sampled in one frame; used by weight oracles."""

    prev_objects: List[ObjectState]
    new_objects: List[ObjectState]
    new_clusters: List[int]
    included: np.ndarray
    sampled_classes: np.ndarray
    association: AssociationResult
    log_weight: float  # closed-form, relative to the frame baseline


@dataclass
class FilterState:
    particles: ParticleSet
    frame_index: int = -1
    log_marginal_estimate: float = 0.0
    rng_seed: int = 0
    stream: int = 0
    next_track_id: int = 0
    ess: float = float("nan")
    frame_log_mean_weight: float = 0.0
    baseline: float = 0.0
    transitions: Optional[TransitionRecord] = None
    records: Optional[List[PropagationRecord]] = None

    @classmethod
    def initial(
        cls,
        num_particles: int,
        num_classes: int,
        seed: int = 0,
        objects: Sequence[ObjectState] = (),
        stream: int = 0,
    ) -> "FilterState":
        if num_particles < 1:
            raise ValueError("need at least one particle")
        ids = [o.track_id for o in objects if o.track_id is not None]
        return cls(
            particles=ParticleSet.from_objects(num_particles, objects, num_classes),
            rng_seed=int(seed),
            stream=int(stream),
            next_track_id=(max(ids) + 1) if ids else len(objects),
        )

    @property
    def num_particles(self) -> int:
        return self.particles.num_particles


# ---------------------------------------------------------------------------
# per-frame, particle-independent quantities
# ---------------------------------------------------------------------------


@dataclass
class FrameTerms:
    clusters: List[Cluster]
    mean: np.ndarray  # (C, 4) cluster mean boxes
    info_mean: np.ndarray  # (C, 4) M * Sigma(B)^-1 mu(B)
    # matched posterior (transition variance is state independent)
    post_cov: np.ndarray
    post_chol: np.ndarray
    post_logdet_prec: np.ndarray
    # unmatched posterior
    new_mean: np.ndarray
    new_cov: np.ndarray
    new_chol: np.ndarray
    new_logdet_prec: np.ndarray
    new_quad: np.ndarray  # mu0'^T Sigma0'^-1 mu0'
    log_fused: np.ndarray  # (C, K)
    inclusion: np.ndarray  # (C,)
    baseline: float


def _spd_inverse(mat: np.ndarray):
    chol = np.linalg.cholesky(mat)
    inv_chol = np.linalg.inv(chol)
    inv = inv_chol.T @ inv_chol
    return 0.5 * (inv + inv.T), 2.0 * np.sum(np.log(np.diag(chol)))


def frame_terms(frame: FrameObservations, params: ModelParams) -> FrameTerms:
    clusters = cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd)
    C, K = len(clusters), params.num_classes
    motion = params.motion
    d_inv = np.exp(-2.0 * motion.s)
    prior_prec, prior_logdet_cov = _spd_inverse(params.prior_cov)
    prior_h = prior_prec @ params.prior_mean
    prior_quad = float(params.prior_mean @ prior_h)

    mean = np.zeros((C, 4))
    info_mean = np.zeros((C, 4))
    post_cov = np.zeros((C, 4, 4))
    post_chol = np.zeros((C, 4, 4))
    post_ld = np.zeros(C)
    new_mean = np.zeros((C, 4))
    new_cov = np.zeros((C, 4, 4))
    new_chol = np.zeros((C, 4, 4))
    new_ld = np.zeros(C)
    new_quad = np.zeros(C)
    log_fused = np.zeros((C, K))
    inclusion = np.zeros(C)
    baseline = 0.0
    alpha = params.alpha
    dnorm = dirichlet_log_norm(K, alpha)
    for i, cl in enumerate(clusters):
        m = cl.count
        scat_prec, scat_logdet_cov = _spd_inverse(cl.scatter)
        info = m * scat_prec
        mean[i] = cl.mean
        info_mean[i] = info @ cl.mean

        prec = np.diag(d_inv) + info
        post_cov[i], post_ld[i] = _spd_inverse(prec)
        post_chol[i] = np.linalg.cholesky(post_cov[i])

        prec0 = prior_prec + info
        new_cov[i], new_ld[i] = _spd_inverse(prec0)
        new_chol[i] = np.linalg.cholesky(new_cov[i])
        rhs0 = prior_h + info_mean[i]
        new_mean[i] = new_cov[i] @ rhs0
        new_quad[i] = new_mean[i] @ rhs0

        with np.errstate(divide="ignore"):
            log_fused[i] = np.log(cl.fused_class)
        inclusion[i] = cl.inclusion_prob

        # clutter-baseline log factor of this cluster
        boxes = np.stack([frame.anchors[j].box for j in cl.anchor_indices])
        anchor_quad = float(np.einsum("ni,ij,nj->", boxes, scat_prec, boxes))
        anchor_const = -0.5 * m * (4 * LOG_2PI + scat_logdet_cov) - 0.5 * anchor_quad
        log_z0 = (
            -0.5 * (4 * LOG_2PI + prior_logdet_cov)
            - 0.5 * prior_quad
            + anchor_const
            + 2.0 * LOG_2PI
            - 0.5 * new_ld[i]
            + 0.5 * new_quad[i]
        )
        baseline += (
            m * math.log(alpha + 1.0)
            + float(np.logaddexp(cl.log_real, cl.log_clutter))
            + m * dnorm
            + float(logsumexp(cl.log_class_lik))
            - math.log(K)
            + log_z0
        )
    return FrameTerms(
        clusters, mean, info_mean, post_cov, post_chol, post_ld,
        new_mean, new_cov, new_chol, new_ld, new_quad, log_fused, inclusion, baseline,
    )


# ---------------------------------------------------------------------------
# single-particle operations (reference forms of the vectorized step)
# ---------------------------------------------------------------------------


def initial_sample(clusters: Sequence[Cluster], rng: np.random.Generator, first_track_id: int = 0):
    """Sample candidate objects from clusters: include w.p. p_i, class ~ c_i."""
    objects = []
    next_id = first_track_id
    for cl in clusters:
        if rng.random() < cl.inclusion_prob:
            cls = int(rng.choice(len(cl.fused_class), p=cl.fused_class))
            objects.append(ObjectState(cl.mean, cls, next_id))
            next_id += 1
    return objects


def association_scores(prev_boxes, prev_classes, new_means, log_fused, motion: MotionParams):
    """Affinity J[i, j] = log IoU(predicted prev i, new j) + log c_j[class_i], and the IoUs."""
    pred = motion.predict(np.asarray(prev_boxes, dtype=np.float64).reshape(-1, 4))
    overlaps = iou_matrix(pred, new_means)
    with np.errstate(divide="ignore"):
        score = np.log(overlaps) + np.asarray(log_fused)[:, np.asarray(prev_classes, dtype=int)].T
    return score, overlaps


def _match(score: np.ndarray, overlaps: np.ndarray, iou_min: float):
    n, m = score.shape
    if n == 0 or m == 0:
        return []
    if n == 1 and m == 1:
        ok = overlaps[0, 0] >= iou_min and np.isfinite(score[0, 0])
        return [(0, 0)] if ok else []
    rows, cols = solve_assignment(score, maximize=True)
    return [
        (int(r), int(c))
        for r, c in zip(rows, cols)
        if overlaps[r, c] >= iou_min and np.isfinite(score[r, c])
    ]


def associate(prev_objects, new_objects, clusters, motion: MotionParams, iou_min: float,
              new_clusters: Optional[Sequence[int]] = None) -> AssociationResult:
    """Hungarian association of new objects (one per cluster) to previous objects.

    ``new_clusters[j]`` names the cluster new object ``j`` came from (defaults
    to ``j``); its fused class distribution enters the affinity.
    """
    if new_clusters is None:
        new_clusters = list(range(len(new_objects)))
    if not prev_objects or not new_objects:
        return AssociationResult([], list(range(len(new_objects))), list(range(len(prev_objects))))
    means = np.stack([clusters[c].mean for c in new_clusters])
    with np.errstate(divide="ignore"):
        log_fused = np.log(np.stack([clusters[c].fused_class for c in new_clusters]))
    score, overlaps = association_scores(
        [o.box for o in prev_objects], [o.class_id for o in prev_objects], means, log_fused, motion
    )
    matches = _match(score, overlaps, iou_min)
    mp = {r for r, _ in matches}
    mn = {c for _, c in matches}
    return AssociationResult(
        matches=sorted(matches),
        unmatched_new=[j for j in range(len(new_objects)) if j not in mn],
        unmatched_prev=[i for i in range(len(prev_objects)) if i not in mp],
    )


def proposal_update_matched(prev: ObjectState, cluster: Cluster, motion: MotionParams, rng=None, noise=None):
    """Sample the matched posterior; returns ``(box, log_density, mean, cov)``."""
    d_inv = np.exp(-2.0 * motion.s)
    info = cluster.count * np.linalg.inv(cluster.scatter)
    cov, _ = _spd_inverse(np.diag(d_inv) + info)
    mean = cov @ (d_inv * motion.predict(prev.box) + info @ cluster.mean)
    return _draw(mean, cov, rng, noise)


def proposal_update_unmatched(cluster: Cluster, params: ModelParams, rng=None, noise=None):
    """Sample the new-object posterior; returns ``(box, log_density, mean, cov)``."""
    prior_prec = np.linalg.inv(params.prior_cov)
    info = cluster.count * np.linalg.inv(cluster.scatter)
    cov, _ = _spd_inverse(prior_prec + info)
    mean = cov @ (prior_prec @ params.prior_mean + info @ cluster.mean)
    return _draw(mean, cov, rng, noise)


def _draw(mean, cov, rng, noise):
    chol = np.linalg.cholesky(cov)
    z = np.asarray(noise) if noise is not None else rng.standard_normal(4)
    box = mean + chol @ z
    logdens = float(-0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 2.0 * LOG_2PI)
    return box, logdens, mean, cov


def importance_log_weight(
    k_prev: int,
    k_matched: int,
    k_total: int,
    matched_pred: np.ndarray,
    matched_clusters: Sequence[int],
    matched_classes: Sequence[int],
    terms: FrameTerms,
    params: ModelParams,
) -> float:
    """Closed-form log importance weight of one particle (relative to the baseline).

    ``matched_pred`` holds the predicted means g(prev) of the matched
    ancestors, one row per match, in the same order as ``matched_clusters``.
    """
    lw = _dynamics_log_weight(
        np.array([k_prev]), np.array([k_matched]), np.array([k_total]), params
    )[0]
    if k_matched:
        pred = np.asarray(matched_pred, dtype=np.float64).reshape(-1, 4)
        lw += float(
            np.sum(
                _matched_terms(pred, np.asarray(matched_clusters), np.asarray(matched_classes), terms, params)[0]
            )
        )
    return float(lw)


def _dynamics_log_weight(k_prev, k_matched, k_total, params: ModelParams) -> np.ndarray:
    births = k_total - k_matched
    deaths = k_prev - k_matched
    lam_b = params.lambda_birth
    if lam_b > 0:
        log_birth = births * math.log(lam_b) - lam_b - gammaln(births + 1)
    else:
        log_birth = np.where(births == 0, 0.0, -np.inf)
    log_assoc = -(gammaln(k_total + 1) - gammaln(k_matched + 1) - gammaln(births + 1))
    return (
        xlogy(deaths, params.lambda_death)
        + k_matched * math.log1p(-params.lambda_death)
        + log_birth
        + log_assoc
    )


def _matched_terms(pred, clusters, classes, terms: FrameTerms, params: ModelParams):
    """Per-match log factors (the R_D / tau_D / class terms) and posterior moments."""
    s = params.motion.s
    d_inv = np.exp(-2.0 * s)
    prior_prec, prior_logdet_cov = _spd_inverse(params.prior_cov)
    prior_quad = float(params.prior_mean @ prior_prec @ params.prior_mean)
    rhs = d_inv * pred + terms.info_mean[clusters]
    mean = np.einsum("nij,nj->ni", terms.post_cov[clusters], rhs)
    quad_prior = np.sum(pred * pred * d_inv, axis=1)
    quad_post = np.sum(mean * rhs, axis=1)
    r_d = quad_prior - prior_quad - quad_post + terms.new_quad[clusters]
    log_tau = (
        -np.sum(s)
        + 0.5 * prior_logdet_cov
        - 0.5 * terms.post_logdet_prec[clusters]
        + 0.5 * terms.new_logdet_prec[clusters]
    )
    log_class = terms.log_fused[clusters, classes] + math.log(params.num_classes)
    return -0.5 * r_d + log_tau + log_class, mean


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def effective_sample_size(log_weights: np.ndarray) -> float:
    lw = np.asarray(log_weights, dtype=np.float64)
    top = logsumexp(lw)
    if not np.isfinite(top):
        return 0.0
    return float(np.exp(2.0 * top - logsumexp(2.0 * lw)))


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Ancestor indices from normalized weights and one uniform ``u`` in [0, 1)."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def resample(particles: ParticleSet, rng) -> ParticleSet:
    """Systematic resampling of a particle set; raises on all-zero weights."""
    lw = particles.log_weights
    top = logsumexp(lw)
    if not np.isfinite(top):
        raise DegenerateParticlesError()
    u = rng.random() if hasattr(rng, "random") else float(rng)
    return particles.select(systematic_resample(np.exp(lw - top), u))


# ---------------------------------------------------------------------------
# the filter step
# ---------------------------------------------------------------------------


def _associate_chunk(lo, hi, offsets, included, score_all, iou_all, iou_min, entry_idx, match_row):
    for l in range(lo, hi):
        r0, r1 = offsets[l], offsets[l + 1]
        if r0 == r1:
            continue
        incl = np.flatnonzero(included[l])
        if incl.size == 0:
            continue
        pairs = _match(score_all[r0:r1][:, incl], iou_all[r0:r1][:, incl], iou_min)
        for r, c in pairs:
            match_row[entry_idx[l, incl[c]]] = r0 + r


def step(
    state: FilterState,
    frame: FrameObservations,
    params: ModelParams,
    workers: Optional[int] = None,
    keep_records: bool = False,
) -> FilterState:
    """Advance the filter by one frame and return the new weighted state."""
    N = state.num_particles
    K = params.num_classes
    rng = np.random.default_rng([state.rng_seed, state.stream, frame.frame_index])
    u_resample = rng.random()

    particles = state.particles
    if not np.isfinite(logsumexp(particles.log_weights)):
        raise DegenerateParticlesError(frame_index=frame.frame_index)
    if effective_sample_size(particles.log_weights) < N / 2.0:
        particles = resample(particles, u_resample)
    else:
        particles = replace(particles, ancestors=np.arange(N))
    prev_lw = particles.log_weights

    terms = frame_terms(frame, params)
    C = len(terms.clusters)
    u_incl = rng.random((N, C))
    u_cls = rng.random((N, C))
    noise = rng.standard_normal((N, C, 4))

    included = u_incl < terms.inclusion[None, :]
    # inverse-CDF class draw for every (particle, cluster)
    cdf = np.cumsum(np.exp(terms.log_fused), axis=1)
    sampled_cls = (u_cls[:, :, None] >= cdf[None, :, :-1]).sum(axis=2).astype(np.int64)

    # association
    offsets = particles.offsets
    prev_counts = np.diff(offsets)
    motion = params.motion
    pred_all = motion.predict(particles.boxes) if particles.boxes.shape[0] else np.zeros((0, 4))
    if C and pred_all.shape[0]:
        score_all, iou_all = association_scores(
            particles.boxes, particles.classes, terms.mean, terms.log_fused, motion
        )
    else:
        score_all = iou_all = np.zeros((pred_all.shape[0], C))
    ent_l, ent_c = np.nonzero(included)
    n_ent = ent_l.shape[0]
    entry_idx = np.full((N, C), -1, dtype=np.int64)
    entry_idx[ent_l, ent_c] = np.arange(n_ent)
    match_row = np.full(n_ent, -1, dtype=np.int64)
    n_workers = workers if workers is not None else thread_count()
    if n_workers > 1 and N > 1:
        bounds = np.linspace(0, N, min(n_workers, N) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_associate_chunk, bounds[w], bounds[w + 1], offsets, included,
                            score_all, iou_all, params.iou_min, entry_idx, match_row)
                for w in range(len(bounds) - 1)
            ]
            for f in futures:
                f.result()
    else:
        _associate_chunk(0, N, offsets, included, score_all, iou_all, params.iou_min, entry_idx, match_row)

    # proposals and weights, vectorized over all (particle, cluster) entries
    matched = match_row >= 0
    rows_m = match_row[matched]
    cl_m = ent_c[matched]
    own_m = ent_l[matched]
    cls_m = particles.classes[rows_m]
    term_m, mean_m = _matched_terms(pred_all[rows_m], cl_m, cls_m, terms, params)
    box_m = mean_m + np.einsum("nij,nj->ni", terms.post_chol[cl_m], noise[own_m, cl_m])

    un = ~matched
    cl_u = ent_c[un]
    own_u = ent_l[un]
    mean_u = terms.new_mean[cl_u]
    box_u = mean_u + np.einsum("nij,nj->ni", terms.new_chol[cl_u], noise[own_u, cl_u])

    k_matched = np.bincount(own_m, minlength=N)
    k_total = included.sum(axis=1)
    log_w = _dynamics_log_weight(prev_counts, k_matched, k_total, params)
    log_w = log_w + np.bincount(own_m, weights=term_m, minlength=N)

    # assemble the new particle set (rows ordered by particle, then cluster)
    boxes = np.zeros((n_ent, 4))
    means = np.zeros((n_ent, 4))
    covs = np.zeros((n_ent, 4, 4))
    classes = np.zeros(n_ent, dtype=np.int64)
    ids = np.zeros(n_ent, dtype=np.int64)
    class_logp = np.zeros((n_ent, K))
    boxes[matched], boxes[un] = box_m, box_u
    means[matched], means[un] = mean_m, mean_u
    covs[matched], covs[un] = terms.post_cov[cl_m], terms.new_cov[cl_u]
    classes[matched], classes[un] = cls_m, sampled_cls[own_u, cl_u]
    ids[matched], ids[un] = particles.track_ids[rows_m], state.next_track_id + cl_u
    if n_ent:
        acc = particles.class_logp[rows_m] + terms.log_fused[cl_m]
        class_logp[matched] = acc - logsumexp(acc, axis=1, keepdims=True)
        class_logp[un] = terms.log_fused[cl_u]

    joint = prev_lw + log_w
    top = logsumexp(joint)
    if not np.isfinite(top):
        raise DegenerateParticlesError(frame_index=frame.frame_index)
    new_lw = joint - top
    new_set = ParticleSet(
        owner=ent_l.astype(np.int64),
        boxes=boxes,
        means=means,
        covs=covs,
        classes=classes,
        track_ids=ids,
        class_logp=class_logp,
        log_weights=new_lw,
        ancestors=particles.ancestors,
    )
    records = None
    if keep_records:
        records = _build_records(particles, new_set, included, sampled_cls, match_row, ent_l, ent_c, log_w)
    return FilterState(
        particles=new_set,
        frame_index=frame.frame_index,
        log_marginal_estimate=state.log_marginal_estimate + float(top) + terms.baseline,
        rng_seed=state.rng_seed,
        stream=state.stream,
        next_track_id=state.next_track_id + C,
        ess=effective_sample_size(new_lw),
        frame_log_mean_weight=float(top) + terms.baseline,
        baseline=terms.baseline,
        transitions=TransitionRecord(own_m, particles.boxes[rows_m], box_m),
        records=records,
    )


def _build_records(prev, new, included, sampled_cls, match_row, ent_l, ent_c, log_w):
    records = []
    prev_off = prev.offsets
    new_off = new.offsets
    for l in range(prev.num_particles):
        prev_objs = prev.objects_of(l)
        new_objs = new.objects_of(l)
        e0, e1 = new_off[l], new_off[l + 1]
        matches = []
        for local, e in enumerate(range(e0, e1)):
            if match_row[e] >= 0:
                matches.append((int(match_row[e] - prev_off[l]), local))
        mp = {m[0] for m in matches}
        mn = {m[1] for m in matches}
        records.append(
            PropagationRecord(
                prev_objects=prev_objs,
                new_objects=new_objs,
                new_clusters=[int(c) for c in ent_c[e0:e1]],
                included=included[l].copy(),
                sampled_classes=sampled_cls[l].copy(),
                association=AssociationResult(
                    matches=sorted(matches),
                    unmatched_new=[j for j in range(len(new_objs)) if j not in mn],
                    unmatched_prev=[i for i in range(len(prev_objs)) if i not in mp],
                ),
                log_weight=float(log_w[l]),
            )
        )
    return records


def run_filter(frames: Sequence[FrameObservations], params: ModelParams, num_particles: int,
               seed: int = 0, workers: Optional[int] = None) -> List[FilterState]:
    """Filter a whole sequence from an empty initial state; returns the state history."""
    state = FilterState.initial(num_particles, params.num_classes, seed)
    history = []
    for frame in frames:
        state = step(state, frame, params, workers=workers)
        history.append(state)
    return history


# ---------------------------------------------------------------------------
# track extraction
# ---------------------------------------------------------------------------


@dataclass
class TrackEstimate:
    track_id: int
    mean: np.ndarray
    cov: np.ndarray
    class_id: int
    confidence: float
    class_probs: np.ndarray


@dataclass
class TrackOutput:
    frames: List[int] = field(default_factory=list)
    tracks: List[List[TrackEstimate]] = field(default_factory=list)


def frame_estimate(particles: ParticleSet) -> List[TrackEstimate]:
    """Objects of the highest-weight particle with moments pooled over particles.

    For each reported track id, the posterior mean/covariance and class
    distribution are the weight-weighted mixture over every particle that
    carries that id; confidence is the total weight of those particles.
    """
    lw = particles.log_weights
    w = np.exp(lw - logsumexp(lw))
    best = int(np.argmax(lw))
    off = particles.offsets
    best_rows = range(off[best], off[best + 1])
    out = []
    for r in best_rows:
        tid = particles.track_ids[r]
        rows = np.flatnonzero(particles.track_ids == tid)
        ww = w[particles.owner[rows]]
        conf = float(ww.sum())
        wn = ww / conf
        mean = wn @ particles.means[rows]
        diff = particles.means[rows] - mean
        cov = np.einsum("n,nij->ij", wn, particles.covs[rows]) + np.einsum("n,ni,nj->ij", wn, diff, diff)
        probs = wn @ np.exp(particles.class_logp[rows])
        out.append(
            TrackEstimate(int(tid), mean, 0.5 * (cov + cov.T), int(particles.classes[r]),
                          min(conf, 1.0), probs / probs.sum())
        )
    return out


def extract_tracks(history: Sequence[FilterState]) -> TrackOutput:
    if not history:
        raise ValueError("no frames processed")
    out = TrackOutput()
    for state in history:
        out.frames.append(state.frame_index)
        out.tracks.append(frame_estimate(state.particles))
    return out
