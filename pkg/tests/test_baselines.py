import numpy as np
import pytest

from bayes_d2t.baselines import (
    BaselineKind,
    frame_bayesian,
    greedy_link,
    greedy_offset_link,
    kalman_link,
    kalman_log_evidence,
    kalman_predict,
    kalman_update,
    run_baseline,
    single_detector,
)
from bayes_d2t.clustering import FrameObservations, cluster_anchors
from bayes_d2t.io import ObjectRecord
from bayes_d2t.model import AnchorObservation, ModelParams, MotionParams, ObjectState
from bayes_d2t.particle_filter import proposal_update_matched, proposal_update_unmatched
from bayes_d2t.simulator import SimConfig, simulate
from scipy.stats import multivariate_normal


def _anchor(box, e=0.8, k=(0.7, 0.3)):
    return AnchorObservation(np.asarray(box, dtype=float), e, np.array(k))


def _rec(tid, box):
    return ObjectRecord(tid, np.asarray(box, dtype=float), 0, 1.0)


def test_single_detector_one_anchor():
    a = _anchor([0, 0, 2, 2])
    (d,) = single_detector(FrameObservations(0, [a]))
    np.testing.assert_array_equal(d.box, a.box)
    assert d.confidence == pytest.approx(0.8 * 0.7)


def test_single_detector_keeps_higher_score():
    lo, hi = _anchor([0, 0, 2, 2], e=0.3), _anchor([0.1, 0, 2, 2], e=0.9)
    (d,) = single_detector(FrameObservations(0, [lo, hi]))
    np.testing.assert_array_equal(d.box, hi.box)


def test_single_detector_disjoint_all_kept():
    anchors = [_anchor([10 * i, 0, 10 * i + 2, 2]) for i in range(4)]
    assert len(single_detector(FrameObservations(0, anchors))) == 4


def test_frame_bayesian_matches_unmatched_proposal():
    params = ModelParams(eps_pd=0.5)
    frame = FrameObservations(0, [_anchor([0, 0, 2, 2], e=0.9), _anchor([0.2, 0, 2.1, 2], e=0.9),
                                  _anchor([20, 20, 22, 23], e=0.7)])
    dets = frame_bayesian(frame, params, min_inclusion=0.0)
    clusters = cluster_anchors(frame, params.cluster_iou, params.alpha, params.eps_pd)
    assert len(dets) == len(clusters)
    for d, cl in zip(dets, clusters):
        _, _, mean, cov = proposal_update_unmatched(cl, params, noise=np.zeros(4))
        np.testing.assert_allclose(d.box, mean, atol=1e-10)
        np.testing.assert_allclose(d.cov, cov, atol=1e-10)


def test_frame_bayesian_empty():
    assert frame_bayesian(FrameObservations(0, []), ModelParams()) == []


def test_frame_bayesian_zero_alpha_half_inclusion():
    params = ModelParams(alpha=0.0)
    frame = FrameObservations(0, [_anchor([0, 0, 2, 2], e=0.9), _anchor([20, 20, 22, 22], e=0.1)])
    assert [d.confidence for d in frame_bayesian(frame, params, 0.0)] == [0.5, 0.5]


def test_greedy_static_objects_keep_ids():
    frames = [[_rec(0, [0, 0, 2, 2]), _rec(1, [10, 10, 12, 12])] for _ in range(4)]
    linked = greedy_link(frames)
    assert [[d.track_id for d in f] for f in linked] == [[0, 1]] * 4


def test_offset_link_keeps_fast_mover():
    motion = MotionParams(np.eye(4), np.array([1.5, 0, 1.5, 0]), np.zeros(4))
    frames = [[_rec(0, [1.5 * t, 0, 1.5 * t + 2, 2])] for t in range(5)]
    plain = greedy_link(frames, iou_min=0.3)
    offset = greedy_offset_link(frames, motion, iou_min=0.3)
    assert len({f[0].track_id for f in plain}) == 5
    assert len({f[0].track_id for f in offset}) == 1


def test_empty_frame_breaks_tracks():
    frames = [[_rec(0, [0, 0, 2, 2])], [], [_rec(0, [0, 0, 2, 2])]]
    linked = greedy_link(frames)
    assert linked[0][0].track_id != linked[2][0].track_id


def test_kalman_update_equals_matched_proposal():
    rng = np.random.default_rng(0)
    motion = MotionParams(np.eye(4), rng.standard_normal(4), 0.3 * rng.standard_normal(4))
    prev = ObjectState(np.array([0, 0, 3, 3.0]), 0, 0)
    cl = cluster_anchors(FrameObservations(0, [_anchor([0.4, 0.2, 3.3, 3.1])]), 0.5, 1.0, 0.7)[0]
    mean, cov = kalman_update(*kalman_predict(prev.box, np.zeros((4, 4)), motion), cl.mean, cl.scatter / cl.count)
    _, _, pm, pc = proposal_update_matched(prev, cl, motion, noise=np.zeros(4))
    np.testing.assert_allclose(mean, pm, atol=1e-10)
    np.testing.assert_allclose(cov, pc, atol=1e-10)


def test_kalman_zero_process_noise_variance_decreases():
    motion = MotionParams(np.eye(4), np.zeros(4), np.full(4, -30.0))
    mean, cov = np.zeros(4), 10 * np.eye(4)
    traces = []
    for _ in range(6):
        mean, cov = kalman_predict(mean, cov, motion)
        mean, cov = kalman_update(mean, cov, np.ones(4), np.eye(4))
        traces.append(np.trace(cov))
    assert all(a > b for a, b in zip(traces, traces[1:]))


def test_kalman_evidence_matches_joint_gaussian():
    rng = np.random.default_rng(1)
    motion = MotionParams(np.eye(4) * 0.95, rng.standard_normal(4), np.full(4, -0.5))
    T, m0, P0, R = 4, np.zeros(4), 2 * np.eye(4), 0.5 * np.eye(4)
    ys = [rng.standard_normal(4) for _ in range(T)]
    # stack the linear-Gaussian model as one joint normal over all observations
    A, Q = motion.A, np.diag(motion.var)
    means = [m0]
    for _ in range(1, T):
        means.append(A @ means[-1] + motion.b)
    cross = np.zeros((4 * T, 4 * T))
    state_cov = [P0]
    for t in range(1, T):
        state_cov.append(A @ state_cov[-1] @ A.T + Q)
    for i in range(T):
        for j in range(T):
            lo, hi = min(i, j), max(i, j)
            block = np.linalg.matrix_power(A, hi - lo) @ state_cov[lo]
            cross[4 * i:4 * i + 4, 4 * j:4 * j + 4] = block if i >= j else block.T
    cross += np.kron(np.eye(T), R)
    expected = multivariate_normal(np.concatenate(means), cross).logpdf(np.concatenate(ys))
    assert kalman_log_evidence(ys, m0, P0, motion, R) == pytest.approx(expected, rel=1e-10)


def test_kalman_link_tracks_a_single_object():
    params = ModelParams(lambda_death=0.0, lambda_birth=0.0, eps_pd=0.5,
                         motion=MotionParams(np.eye(4), np.array([0.5, 0, 0.5, 0]), np.full(4, -1.0)))
    frames = [FrameObservations(t, [_anchor([0.5 * t, 0, 0.5 * t + 4, 4], e=0.9)]) for t in range(6)]
    out = kalman_link(frames, params)
    assert {f[0].track_id for f in out} == {0}
    assert all(f[0].cov is not None for f in out)


@pytest.mark.parametrize("kind", list(BaselineKind))
def test_run_baseline_shapes(kind):
    scene = simulate(SimConfig(frames=5, seed=2, initial_rate=2.0))
    out = run_baseline(kind, scene.frames, ModelParams(), 0.3)
    assert len(out) == 5
    for frame in out:
        ids = [r.track_id for r in frame]
        assert len(set(ids)) == len(ids)
        assert all(0.0 <= r.confidence <= 1.0 for r in frame)
