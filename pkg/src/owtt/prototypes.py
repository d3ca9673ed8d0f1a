"""Prototype pool: fixed source prototypes plus a bounded novel queue.

Source prototypes are unit-normalized class means computed once from
source-domain features. Novel prototypes are discovered during the stream
by the incremental expansion procedure and live in a FIFO queue so the
pool cannot grow without bound.
"""
from __future__ import annotations

import struct
from collections import deque
from typing import Optional, Tuple

import numpy as np

from .adapter import NORM_EPS
from .errors import DegenerateEmbedding, EmptyClass, EmptyNovelPool
from .scoring import ScoreWindow, adaptive_threshold, batch_extended_scores, ood_score

_POOL_MAGIC = b"OWTP"
_POOL_VERSION = 1


class PrototypePool:
    """Immutable source prototypes and a FIFO queue of novel prototypes."""

    def __init__(self, source: np.ndarray, novel_capacity: int):
        if novel_capacity < 1:
            raise ValueError("novel_capacity must be positive")
        self._source = np.asarray(source, dtype=float)
        self.novel_capacity = novel_capacity
        self._novel: deque = deque(maxlen=novel_capacity)

    @property
    def num_source(self) -> int:
        return self._source.shape[0]

    @property
    def novel_count(self) -> int:
        return len(self._novel)

    def source_matrix(self) -> np.ndarray:
        return self._source

    def novel_matrix(self) -> np.ndarray:
        if not self._novel:
            return np.empty((0, self._source.shape[1]))
        return np.stack(list(self._novel))

    def all_matrix(self) -> np.ndarray:
        if not self._novel:
            return self._source
        return np.vstack([self._source, self.novel_matrix()])

    def novel_at(self, index: int) -> np.ndarray:
        return self._novel[index]

    def push_novel(self, feature: np.ndarray) -> None:
        """Append a novel prototype; the oldest is evicted at capacity."""
        self._novel.append(np.asarray(feature, dtype=float))

    def copy(self) -> "PrototypePool":
        clone = PrototypePool(self._source.copy(), self.novel_capacity)
        for p in self._novel:
            clone._novel.append(p.copy())
        return clone


def build_source_prototypes(
    features: np.ndarray, labels: np.ndarray, num_classes: int
) -> np.ndarray:
    """Per-class mean feature, unit-normalized, one row per class id.

    All similarities downstream are cosines, so normalizing the class means
    changes no decision while keeping every prototype on the unit sphere.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels must lie in [0, num_classes)")
    prototypes = np.zeros((num_classes, features.shape[1]))
    for k in range(num_classes):
        members = features[labels == k]
        if members.shape[0] == 0:
            raise EmptyClass(k)
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < NORM_EPS:
            raise DegenerateEmbedding(f"class {k} mean collapsed to zero norm")
        prototypes[k] = mean / norm
    return prototypes


def expand(
    pool: PrototypePool,
    batch_features: np.ndarray,
    window: ScoreWindow,
    clamp_range: Optional[Tuple[float, float]] = None,
    fixed_threshold: Optional[float] = None,
) -> int:
    """Incrementally add batch features as novel prototypes; returns count added.

    Extended scores for the whole batch feed the dedicated window first and
    the threshold is estimated once. Candidates are then visited in
    descending initial-score order, and each is re-scored against the
    current (growing) pool before insertion, so near-duplicates from the
    same batch cannot all enter.
    """
    batch_features = np.asarray(batch_features, dtype=float)
    if batch_features.shape[0] == 0:
        return 0
    initial = batch_extended_scores(batch_features, pool)
    window.push(initial)
    if fixed_threshold is not None:
        tau = fixed_threshold
    else:
        tau = adaptive_threshold(window, clamp_range).tau

    added = 0
    for i in np.argsort(-initial, kind="stable"):
        if initial[i] <= tau:
            break  # scores from here on can only be lower; pool growth never raises them
        if ood_score(batch_features[i], pool.all_matrix()) > tau:
            pool.push_novel(batch_features[i].copy())
            added += 1
    return added


def save_pool(pool: PrototypePool, path) -> None:
    """Checkpoint the pool: prototype-count header, then flat float64 rows."""
    source = pool.source_matrix()
    novel = pool.novel_matrix()
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIII",
                _POOL_MAGIC,
                _POOL_VERSION,
                source.shape[1],
                source.shape[0],
                novel.shape[0],
                pool.novel_capacity,
            )
        )
        fh.write(np.ascontiguousarray(source, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(novel, dtype="<f8").tobytes())


def load_pool(path) -> PrototypePool:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIIII"))
        magic, version, dim, n_source, n_novel, capacity = struct.unpack("<4sIIIII", header)
        if magic != _POOL_MAGIC:
            raise ValueError(f"not a pool checkpoint (magic {magic!r})")
        if version != _POOL_VERSION:
            raise ValueError(f"unsupported pool checkpoint version {version}")
        flat = np.frombuffer(fh.read(), dtype="<f8")
    source = flat[: n_source * dim].reshape(n_source, dim)
    novel = flat[n_source * dim :].reshape(n_novel, dim)
    pool = PrototypePool(source.copy(), novel_capacity=capacity)
    for row in novel:
        pool.push_novel(row.copy())
    return pool


def momentum_update_novel(
    pool: PrototypePool, feature: np.ndarray, momentum: float
) -> None:
    """Blend the most similar novel prototype toward feature and renormalize."""
    if pool.novel_count == 0:
        raise EmptyNovelPool("no novel prototypes to update")
    feature = np.asarray(feature, dtype=float)
    sims = pool.novel_matrix() @ feature
    idx = int(np.argmax(sims))
    blended = (1.0 - momentum) * pool.novel_at(idx) + momentum * feature
    norm = np.linalg.norm(blended)
    if norm < NORM_EPS:
        raise DegenerateEmbedding("momentum blend collapsed to zero norm")
    pool._novel[idx] = blended / norm
