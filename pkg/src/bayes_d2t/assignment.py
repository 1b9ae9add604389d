"""Rectangular linear assignment (Hungarian) with forbidden entries."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def solve_assignment(score: np.ndarray, maximize: bool = True):
    """Optimal one-to-one matching of rows to columns.

    ``score`` may contain ``-inf`` (``+inf`` when minimizing) for forbidden
    pairs. Those are replaced by a penalty larger than any achievable finite
    total, so they are chosen only when no alternative exists; callers reject
    such pairs afterwards. Returns ``(rows, cols)`` index arrays with
    ``min(n, m)`` pairs.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ValueError("score must be a 2-D matrix")
    if score.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    cost = -score if maximize else score.copy()
    bad = ~np.isfinite(cost)
    if np.any(cost[bad] < 0):
        raise ValueError("score contains an infinite entry with the wrong sign")
    if bad.any():
        finite = cost[~bad]
        span = (np.abs(finite).max() if finite.size else 0.0) + 1.0
        cost[bad] = span * (min(cost.shape) + 1) * 2.0
    rows, cols = linear_sum_assignment(cost)
    return rows, cols
