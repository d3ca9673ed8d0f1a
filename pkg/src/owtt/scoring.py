"""Strong-OOD scoring, the rolling score window, and adaptive thresholding.

Scores are one minus the best cosine similarity to a prototype set. The
rejection threshold is re-estimated from a rolling window of recent scores
by exhaustively searching a fixed grid for the split that minimizes the
total intra-cluster variance of the two resulting score groups.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyPrototypeSet, EmptyWindow

if TYPE_CHECKING:  # pragma: no cover
    from .prototypes import PrototypePool

# Candidate thresholds: 0.00, 0.01, ..., 1.00.
THRESHOLD_GRID = np.arange(101) / 100.0

# Below this many stored scores the two-cluster objective is noise, so the
# estimator reports a degenerate threshold (reject nothing).
MIN_WINDOW_SCORES = 8

# Number of top novel-prototype similarities averaged by the discrete-mode
# score variant.
DEFAULT_TOP_M = 10


@dataclass
class ThresholdEstimate:
    """Result of one grid search over the score window."""

    tau: float
    objective: Optional[float]
    degenerate: bool


class ScoreWindow:
    """Fixed-capacity FIFO buffer of recent scores, clamped to [0, 1]."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be positive")
        self.capacity = capacity
        self._buffer: deque = deque(maxlen=capacity)

    @property
    def count(self) -> int:
        return len(self._buffer)

    def push(self, scores: Sequence[float]) -> "ScoreWindow":
        """Append scores (oldest evicted at capacity); values clamp to [0, 1]."""
        for s in np.atleast_1d(np.asarray(scores, dtype=float)):
            self._buffer.append(min(max(float(s), 0.0), 1.0))
        return self

    def values(self) -> np.ndarray:
        return np.fromiter(self._buffer, dtype=float, count=len(self._buffer))


def _as_matrix(prototypes) -> np.ndarray:
    mat = np.asarray(prototypes, dtype=float)
    if mat.ndim == 1:
        mat = mat[None, :]
    return mat


def ood_score(feature: np.ndarray, source_prototypes) -> float:
    """Strong-OOD score: one minus the best cosine similarity to a source prototype."""
    mat = _as_matrix(source_prototypes)
    if mat.shape[0] == 0:
        raise EmptyPrototypeSet("no source prototypes")
    return float(1.0 - np.max(mat @ np.asarray(feature, dtype=float)))


def batch_ood_scores(features: np.ndarray, prototypes) -> np.ndarray:
    """Vectorized strong-OOD scores for a batch of unit-norm features."""
    mat = _as_matrix(prototypes)
    if mat.shape[0] == 0:
        raise EmptyPrototypeSet("no source prototypes")
    return 1.0 - np.max(np.asarray(features, dtype=float) @ mat.T, axis=1)


def extended_ood_score(feature: np.ndarray, pool: "PrototypePool") -> float:
    """Strong-OOD score extended over source plus novel prototypes."""
    return ood_score(feature, pool.all_matrix())


def batch_extended_scores(features: np.ndarray, pool: "PrototypePool") -> np.ndarray:
    return batch_ood_scores(features, pool.all_matrix())


def discrete_mode_score(
    feature: np.ndarray, pool: "PrototypePool", top_m: int = DEFAULT_TOP_M
) -> float:
    """Score variant weighing source affinity against mean top-m novel affinity.

    With similarity s to the best source prototype and u the mean of the
    top-m similarities to novel prototypes, the score is
    (1-s)*s/(s+u) + u*u/(s+u). Falls back to the plain score while the
    novel pool is empty; with fewer than top_m novel prototypes the mean
    runs over all of them.
    """
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    source = pool.source_matrix()
    if source.shape[0] == 0:
        raise EmptyPrototypeSet("no source prototypes")
    feature = np.asarray(feature, dtype=float)
    novel = pool.novel_matrix()
    if novel.shape[0] == 0:
        return float(1.0 - np.max(source @ feature))
    s_s = float(np.clip(np.max(source @ feature), 0.0, 1.0))
    sims = np.sort(novel @ feature)[::-1][: min(top_m, novel.shape[0])]
    s_u = float(np.clip(np.mean(sims), 0.0, 1.0))
    total = s_s + s_u
    if total < 1e-12:
        # Feature unrelated to both pools: no evidence either way.
        return 0.5
    return (1.0 - s_s) * s_s / total + s_u * s_u / total


def batch_discrete_scores(
    features: np.ndarray, pool: "PrototypePool", top_m: int = DEFAULT_TOP_M
) -> np.ndarray:
    return np.array([discrete_mode_score(f, pool, top_m) for f in np.asarray(features)])


def split_objective(scores: np.ndarray, tau: float) -> Optional[float]:
    """Total intra-cluster variance of the two score groups split at tau.

    Returns None when either side of the split is empty (invalid candidate).
    """
    scores = np.asarray(scores, dtype=float)
    upper = scores[scores > tau]
    lower = scores[scores <= tau]
    if upper.size == 0 or lower.size == 0:
        return None
    return float(np.var(upper) + np.var(lower))


def adaptive_threshold(
    window: ScoreWindow,
    clamp_range: Optional[Tuple[float, float]] = None,
) -> ThresholdEstimate:
    """Grid-search the split threshold minimizing total intra-cluster variance.

    Every candidate on the 0.00..1.00 grid that leaves at least one score on
    each side is scored; ties break toward the smallest candidate. When no
    candidate is valid (single-mode window, too few scores, or all candidates
    excluded by clamp_range) the estimate is degenerate with tau = 1.0.
    """
    n = window.count
    if n == 0:
        raise EmptyWindow("cannot estimate a threshold from an empty window")
    if n < MIN_WINDOW_SCORES:
        return ThresholdEstimate(tau=1.0, objective=None, degenerate=True)

    scores = np.sort(window.values())
    csum = np.concatenate(([0.0], np.cumsum(scores)))
    csq = np.concatenate(([0.0], np.cumsum(scores * scores)))

    k = np.searchsorted(scores, THRESHOLD_GRID, side="right")  # lower-side counts
    valid = (k >= 1) & (k <= n - 1)
    if clamp_range is not None:
        lo, hi = clamp_range
        valid &= (THRESHOLD_GRID >= lo - 1e-12) & (THRESHOLD_GRID <= hi + 1e-12)
    if not np.any(valid):
        return ThresholdEstimate(tau=1.0, objective=None, degenerate=True)

    k_safe = np.clip(k, 1, n - 1)
    n_lo = k_safe.astype(float)
    n_hi = (n - k_safe).astype(float)
    var_lo = np.maximum(csq[k_safe] / n_lo - (csum[k_safe] / n_lo) ** 2, 0.0)
    var_hi = np.maximum(
        (csq[n] - csq[k_safe]) / n_hi - ((csum[n] - csum[k_safe]) / n_hi) ** 2, 0.0
    )
    objective = np.where(valid, var_lo + var_hi, np.inf)

    best = int(np.argmin(objective))  # argmin takes the first (smallest) candidate
    return ThresholdEstimate(
        tau=float(THRESHOLD_GRID[best]),
        objective=float(objective[best]),
        degenerate=False,
    )
