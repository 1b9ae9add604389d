"""Domain types and the log-densities of the detect-to-track generative model.

Boxes are raw 4-vectors in corner form ``(x1, y1, x2, y2)``. All Gaussians act
on that 4-vector directly. Log-probabilities that are exactly zero in
probability are returned as ``NEG_INF`` (IEEE ``-inf``), which is absorbing
under addition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy
from scipy.stats import multivariate_normal

NEG_INF = -math.inf
LOG_2PI = math.log(2.0 * math.pi)


def as_box(coords) -> np.ndarray:
    """Validate and return a float64 corner-form box."""
    box = np.asarray(coords, dtype=np.float64).reshape(-1)
    if box.shape != (4,):
        raise ValueError(f"box must have 4 coordinates, got shape {box.shape}")
    if not np.all(np.isfinite(box)):
        raise ValueError(f"box has non-finite coordinates: {box}")
    if not (box[0] < box[2] and box[1] < box[3]):
        raise ValueError(f"box must satisfy x1 < x2 and y1 < y2: {box}")
    return box


def _check_spd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (4, 4):
        raise ValueError(f"{name} must be 4x4, got {mat.shape}")
    if not np.allclose(mat, mat.T, rtol=0, atol=1e-9 * max(1.0, np.abs(mat).max())):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return mat


@dataclass(frozen=True, eq=False)
class MotionParams:
    """Linear-Gaussian motion model: next box ~ N(A @ box + b, diag(exp(2 s)))."""

    A: np.ndarray
    b: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64).reshape(4, 4)
        b = np.asarray(self.b, dtype=np.float64).reshape(4)
        s = np.asarray(self.s, dtype=np.float64).reshape(4)
        for name, arr in (("A", A), ("b", b), ("s", s)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"motion parameter {name} must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "s", s)

    @classmethod
    def identity(cls, log_std: float = 0.0) -> "MotionParams":
        return cls(np.eye(4), np.zeros(4), np.full(4, log_std))

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.s)

    def predict(self, boxes: np.ndarray) -> np.ndarray:
        """Predicted means for one box (4,) or a stack of boxes (n, 4)."""
        return np.asarray(boxes) @ self.A.T + self.b

    # flat view, used for gradients and finite differences
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.A.reshape(-1), self.b, self.s])

    @classmethod
    def from_vector(cls, vec) -> "MotionParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (24,):
            raise ValueError(f"motion vector must have 24 entries, got {vec.shape}")
        return cls(vec[:16].reshape(4, 4), vec[16:20], vec[20:])

    def __add__(self, other: "MotionParams") -> "MotionParams":
        return MotionParams.from_vector(self.to_vector() + other.to_vector())

    def scaled(self, factor: float) -> "MotionParams":
        return MotionParams.from_vector(factor * self.to_vector())

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))


@dataclass(frozen=True, eq=False)
class ModelParams:
    lambda_death: float = 0.05
    lambda_birth: float = 0.5
    alpha: float = 1.0
    prior_mean: np.ndarray = field(default_factory=lambda: np.array([-5.0, -5.0, 5.0, 5.0]))
    prior_cov: np.ndarray = field(default_factory=lambda: 25.0 * np.eye(4))
    num_classes: int = 2
    motion: MotionParams = field(default_factory=MotionParams.identity)
    iou_min: float = 0.3
    eps_pd: float = 1e-6
    cluster_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lambda_death < 1.0:
            raise ValueError("lambda_death must lie in [0, 1)")
        if not self.lambda_birth >= 0.0:
            raise ValueError("lambda_birth must be non-negative")
        if not self.alpha >= 0.0:
            raise ValueError("alpha must be non-negative")
        if int(self.num_classes) < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 < self.iou_min <= 1.0:
            raise ValueError("iou_min must lie in (0, 1]")
        if not self.eps_pd > 0.0:
            raise ValueError("eps_pd must be positive")
        if not 0.0 <= self.cluster_iou < 1.0:
            raise ValueError("cluster_iou must lie in [0, 1)")
        mean = np.asarray(self.prior_mean, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(mean)):
            raise ValueError("prior_mean must be finite")
        object.__setattr__(self, "prior_mean", mean)
        object.__setattr__(self, "prior_cov", _check_spd(self.prior_cov, "prior_cov"))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def replace(self, **changes) -> "ModelParams":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return ModelParams(**values)


@dataclass(frozen=True, eq=False)
class ObjectState:
    box: np.ndarray
    class_id: int
    track_id: Optional[int]

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box))
        if int(self.class_id) < 0:
            raise ValueError("class_id must be non-negative")
        object.__setattr__(self, "class_id", int(self.class_id))
        if self.track_id is not None:
            if int(self.track_id) < 0:
                raise ValueError("track_id must be non-negative")
            object.__setattr__(self, "track_id", int(self.track_id))

    @classmethod
    def sampled(cls, box, class_id: int, track_id: Optional[int]) -> "ObjectState":
        """Latent state drawn from a Gaussian proposal, exempt from the corner-order check.

        The box posterior is Gaussian on all of R^4, so a sample can have
        ``x1 >= x2``; such states are still valid points of the model.
        """
        obj = object.__new__(cls)
        object.__setattr__(obj, "box", np.asarray(box, dtype=np.float64).reshape(4))
        object.__setattr__(obj, "class_id", int(class_id))
        object.__setattr__(obj, "track_id", None if track_id is None else int(track_id))
        return obj

    def __eq__(self, other):
        if not isinstance(other, ObjectState):
            return NotImplemented
        return (
            np.array_equal(self.box, other.box)
            and self.class_id == other.class_id
            and self.track_id == other.track_id
        )

    def __repr__(self):
        return f"ObjectState(box={self.box.tolist()}, class_id={self.class_id}, track_id={self.track_id})"


@dataclass(frozen=True, eq=False)
class AnchorObservation:
    box: np.ndarray
    appearance: float
    class_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box))
        e = float(self.appearance)
        if not 0.0 < e < 1.0:
            raise ValueError(f"appearance score must lie in (0, 1), got {e}")
        object.__setattr__(self, "appearance", e)
        k = np.asarray(self.class_scores, dtype=np.float64).reshape(-1)
        if k.size == 0 or np.any(k < 0) or abs(k.sum() - 1.0) > 1e-9:
            raise ValueError("class_scores must lie on the probability simplex")
        object.__setattr__(self, "class_scores", k)

    def __eq__(self, other):
        if not isinstance(other, AnchorObservation):
            return NotImplemented
        return (
            np.array_equal(self.box, other.box)
            and self.appearance == other.appearance
            and np.array_equal(self.class_scores, other.class_scores)
        )


@dataclass(frozen=True, eq=False)
class Cluster:
    anchor_indices: tuple
    mean: np.ndarray
    scatter: np.ndarray
    count: int
    fused_class: np.ndarray
    inclusion_prob: float
    # sufficient statistics kept for the closed-form weights
    log_class_lik: np.ndarray = None  # alpha * sum_j log K_jk, shape (K,)
    log_real: float = 0.0  # alpha * sum_j log e_j
    log_clutter: float = 0.0  # alpha * sum_j log(1 - e_j)


@dataclass
class Particle:
    """One weighted multi-object hypothesis (a view into a particle set)."""

    objects: list
    log_weight: float
    ancestor: int


@dataclass
class AssociationResult:
    matches: list  # (prev_index, new_index) pairs
    unmatched_new: list
    unmatched_prev: list


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def motion_predict(state: ObjectState, params: MotionParams):
    """Mean and per-dimension variance of the next box."""
    return params.predict(state.box), params.var


def transition_log_prob(next_box, state: ObjectState, params: MotionParams) -> float:
    mean, var = motion_predict(state, params)
    resid = np.asarray(next_box, dtype=np.float64) - mean
    return float(-0.5 * np.sum(resid**2 / var) - np.sum(params.s) - 2.0 * LOG_2PI)


def log_poisson(k: int, rate: float) -> float:
    if k < 0:
        return NEG_INF
    if rate == 0.0:
        return 0.0 if k == 0 else NEG_INF
    return k * math.log(rate) - rate - math.lgamma(k + 1)


def birth_death_log_prob(k_prev: int, k_survived: int, k_new: int, params: ModelParams) -> float:
    if not (0 <= k_survived <= k_prev) or k_new < 0:
        raise ValueError(
            f"invalid counts: k_prev={k_prev}, k_survived={k_survived}, k_new={k_new}"
        )
    lam = params.lambda_death
    return (
        float(xlogy(k_prev - k_survived, lam))
        + k_survived * math.log1p(-lam)
        + log_poisson(k_new, params.lambda_birth)
    )


def log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def association_log_prior(k_survived: int, k_total_new: int) -> float:
    if not 0 <= k_survived <= k_total_new:
        raise ValueError(f"need 0 <= k_survived <= k_total_new, got {k_survived}, {k_total_new}")
    return -log_binom(k_total_new, k_survived)


def gaussian_log_pdf(x, mean, cov) -> float:
    """Multivariate normal log-density via Cholesky; raises on non-SPD cov."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance is not positive definite") from None
    z = np.linalg.solve(chol, diff)
    return float(
        -0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * diff.size * LOG_2PI
    )


def new_object_log_prior(box, class_id: int, params: ModelParams) -> float:
    if not 0 <= class_id < params.num_classes:
        raise ValueError(f"class_id {class_id} out of range")
    return gaussian_log_pdf(box, params.prior_mean, params.prior_cov) - math.log(params.num_classes)


def dirichlet_log_norm(num_classes: int, alpha: float) -> float:
    """log Gamma(K + alpha) - log Gamma(alpha + 1): the Dirichlet normalizer."""
    return math.lgamma(num_classes + alpha) - math.lgamma(alpha + 1.0)


def class_emission_log_prob(class_scores, true_class: int, alpha: float) -> float:
    scores = np.asarray(class_scores, dtype=np.float64)
    if not 0 <= true_class < scores.size:
        raise ValueError(f"true_class {true_class} out of range")
    p = scores[true_class]
    if p <= 0.0:
        return NEG_INF if alpha > 0 else dirichlet_log_norm(scores.size, alpha)
    return dirichlet_log_norm(scores.size, alpha) + alpha * math.log(p)


def appearance_emission_log_prob(e: float, is_real: bool, alpha: float) -> float:
    if not 0.0 < e < 1.0:
        raise ValueError(f"appearance score must lie in (0, 1), got {e}")
    base = math.log(alpha + 1.0)
    return base + alpha * (math.log(e) if is_real else math.log1p(-e))


def location_emission_log_prob(anchor_box, object_box, scatter) -> float:
    return gaussian_log_pdf(anchor_box, object_box, scatter)


def clutter_cluster_log_marginal(anchors: Sequence[AnchorObservation], scatter, params: ModelParams) -> float:
    """Log-probability of a clutter cluster's anchors with location and class integrated out.

    All anchors of the cluster share one latent location drawn from the
    new-object prior and one latent class drawn uniformly; each anchor box is
    Gaussian around the location with the cluster scatter.
    """
    m = len(anchors)
    if m == 0:
        return 0.0
    alpha = params.alpha
    K = params.num_classes
    boxes = np.concatenate([a.box for a in anchors])
    mean = np.tile(params.prior_mean, m)
    cov = np.kron(np.ones((m, m)), params.prior_cov) + np.kron(np.eye(m), scatter)
    loc = float(multivariate_normal(mean, cov).logpdf(boxes))
    per_class = np.array(
        [sum(class_emission_log_prob(a.class_scores, k, alpha) for a in anchors) for k in range(K)]
    )
    cls = float(logsumexp(per_class)) - math.log(K)
    app = sum(appearance_emission_log_prob(a.appearance, False, alpha) for a in anchors)
    return loc + cls + app


def joint_transition_log_prob(prev, next_objects, assoc: AssociationResult, params: ModelParams) -> float:
    k_prev = len(prev)
    k_survived = len(assoc.matches)
    k_total = len(next_objects)
    if k_survived > min(k_prev, k_total):
        raise ValueError("association has more matches than objects")
    total = association_log_prior(k_survived, k_total)
    total += birth_death_log_prob(k_prev, k_survived, k_total - k_survived, params)
    matched_new = set()
    for i_prev, i_new in assoc.matches:
        p, n = prev[i_prev], next_objects[i_new]
        if p.class_id != n.class_id:
            return NEG_INF
        total += transition_log_prob(n.box, p, params.motion)
        matched_new.add(i_new)
    for i_new, obj in enumerate(next_objects):
        if i_new not in matched_new:
            total += new_object_log_prior(obj.box, obj.class_id, params)
    return total


def joint_emission_log_prob(anchors, clusters, objects, assignment, params: ModelParams) -> float:
    """Log-probability of a frame's anchors given objects and an anchor assignment.

    ``assignment[j]`` is the index of the object that emitted anchor ``j`` or
    ``None`` for clutter. Real anchors use their cluster's scatter as the
    emission covariance; clutter anchors are grouped by cluster and scored by
    :func:`clutter_cluster_log_marginal`.
    """
    if len(assignment) != len(anchors):
        raise ValueError("assignment must cover every anchor exactly once")
    cluster_of = {}
    for ci, cl in enumerate(clusters):
        for j in cl.anchor_indices:
            cluster_of[j] = ci
    alpha = params.alpha
    total = 0.0
    clutter_groups: dict = {}
    for j, (anchor, owner) in enumerate(zip(anchors, assignment)):
        ci = cluster_of[j]
        if owner is None:
            clutter_groups.setdefault(ci, []).append(anchor)
            continue
        obj = objects[owner]
        total += appearance_emission_log_prob(anchor.appearance, True, alpha)
        total += location_emission_log_prob(anchor.box, obj.box, clusters[ci].scatter)
        total += class_emission_log_prob(anchor.class_scores, obj.class_id, alpha)
    for ci, group in clutter_groups.items():
        total += clutter_cluster_log_marginal(group, clusters[ci].scatter, params)
    return total
