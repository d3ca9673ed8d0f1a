"""Training objectives: prototype-clustering loss, Gaussian alignment loss,
their analytic gradients through the adapter, and streaming target statistics.

Prototypes are constants for gradient purposes; only the adapter weight
receives gradients, propagated through the unit-normalization Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import AdapterState
from .errors import NumericalFailure, UnknownLabel
from .prototypes import PrototypePool

# Added to covariance diagonals before inversion: early in a stream the
# estimated covariance can be rank-deficient.
COV_EPS = 1e-4


@dataclass
class GaussianStats:
    """Streaming mean/covariance of one feature distribution."""

    mean: np.ndarray
    covariance: np.ndarray
    initialized: bool
    momentum: float
    # Blend weight applied to the most recent batch (1.0 for the initializing
    # batch, `momentum` afterwards); needed to differentiate through it.
    last_blend: float = 0.0

    @classmethod
    def empty(cls, dim: int, momentum: float) -> "GaussianStats":
        return cls(
            mean=np.zeros(dim),
            covariance=np.zeros((dim, dim)),
            initialized=False,
            momentum=momentum,
        )


@dataclass
class LossBundle:
    """Per-batch losses; total is clustering + lam * alignment."""

    clustering_loss: float
    alignment_loss: float
    lam: float
    temperature: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.clustering_loss + self.lam * self.alignment_loss


def fit_gaussian(features: np.ndarray, momentum: float) -> GaussianStats:
    """Population mean/covariance of a full feature set (source-domain stats)."""
    features = np.asarray(features, dtype=float)
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / features.shape[0]
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, covariance=cov, initialized=True, momentum=momentum)


def _batch_moments(features: np.ndarray):
    n = features.shape[0]
    mean = features.mean(axis=0)
    if n > 1:
        centered = features - mean
        cov = centered.T @ centered / (n - 1)
    else:
        cov = np.zeros((features.shape[1], features.shape[1]))
    return mean, cov


def update_target_stats(stats: GaussianStats, batch_features: np.ndarray) -> GaussianStats:
    """Blend batch mean/covariance into the running estimate (momentum EMA).

    The first non-empty batch initializes the estimate outright; later
    batches blend in with weight `momentum`. An empty batch is a no-op.
    """
    batch_features = np.asarray(batch_features, dtype=float)
    if batch_features.shape[0] == 0:
        return stats
    batch_mean, batch_cov = _batch_moments(batch_features)
    if not stats.initialized:
        mean, cov, blend = batch_mean, batch_cov, 1.0
    else:
        beta = stats.momentum
        mean = (1.0 - beta) * stats.mean + beta * batch_mean
        cov = (1.0 - beta) * stats.covariance + beta * batch_cov
        blend = beta
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(
        mean=mean,
        covariance=cov,
        initialized=True,
        momentum=stats.momentum,
        last_blend=blend,
    )


def _chol_logdet(matrix: np.ndarray, name: str) -> float:
    try:
        chol = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"{name} covariance not positive-definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def kl_divergence(source: GaussianStats, target: GaussianStats, eps: float = COV_EPS) -> float:
    """Closed-form KL divergence from the source Gaussian to the target Gaussian.

    Both covariances are regularized with eps on the diagonal before any
    inversion or determinant. Small negative results (round-off) clamp to 0.
    """
    if not (source.initialized and target.initialized):
        raise ValueError("both Gaussian estimates must be initialized")
    dim = source.mean.shape[0]
    reg_s = source.covariance + eps * np.eye(dim)
    reg_t = target.covariance + eps * np.eye(dim)
    logdet_s = _chol_logdet(reg_s, "source")
    logdet_t = _chol_logdet(reg_t, "target")
    trace_term = float(np.trace(np.linalg.solve(reg_t, reg_s)))
    delta = source.mean - target.mean
    mahal = float(delta @ np.linalg.solve(reg_t, delta))
    kl = 0.5 * (trace_term + mahal - dim + logdet_t - logdet_s)
    if kl < 0.0:
        if kl < -1e-8:
            raise NumericalFailure(f"KL divergence {kl:.3e} below round-off tolerance")
        kl = 0.0
    return kl


def _chain_to_weight(
    grad_features: np.ndarray,
    features: np.ndarray,
    adapter: AdapterState,
    raw_inputs: np.ndarray,
) -> np.ndarray:
    """Propagate per-feature gradients through unit normalization to the weight."""
    raw_inputs = np.asarray(raw_inputs, dtype=float)
    norms = np.linalg.norm(raw_inputs @ adapter.weight.T, axis=1)
    radial = np.sum(features * grad_features, axis=1, keepdims=True)
    grad_pre = (grad_features - features * radial) / norms[:, None]
    return grad_pre.T @ raw_inputs


def kl_gradient(
    source: GaussianStats,
    target: GaussianStats,
    batch_features: np.ndarray,
    adapter: AdapterState,
    raw_inputs: np.ndarray,
    eps: float = COV_EPS,
) -> np.ndarray:
    """Gradient of the KL loss with respect to the adapter weight.

    Differentiates only through the current batch's contribution to the
    target mean/covariance (target must already include this batch); the
    EMA history and the source statistics are constants.
    """
    if not (source.initialized and target.initialized):
        raise ValueError("both Gaussian estimates must be initialized")
    batch_features = np.asarray(batch_features, dtype=float)
    n = batch_features.shape[0]
    if n == 0 or target.last_blend == 0.0:
        return np.zeros_like(adapter.weight)

    dim = source.mean.shape[0]
    reg_s = source.covariance + eps * np.eye(dim)
    reg_t = target.covariance + eps * np.eye(dim)
    _chol_logdet(reg_t, "target")  # positive-definiteness check
    t_inv = np.linalg.inv(reg_t)
    delta = source.mean - target.mean
    grad_mean = t_inv @ (target.mean - source.mean)
    grad_cov = 0.5 * (t_inv - t_inv @ reg_s @ t_inv - t_inv @ np.outer(delta, delta) @ t_inv)

    centered = batch_features - batch_features.mean(axis=0)
    grad_features = np.tile(grad_mean / n, (n, 1))
    if n > 1:
        grad_features = grad_features + (2.0 / (n - 1)) * centered @ grad_cov
    grad_features *= target.last_blend
    return _chain_to_weight(grad_features, batch_features, adapter, raw_inputs)


def _logsumexp(rows: np.ndarray) -> np.ndarray:
    peak = rows.max(axis=1, keepdims=True)
    return (peak + np.log(np.sum(np.exp(rows - peak), axis=1, keepdims=True)))[:, 0]


def _split_labels(pseudo_labels: Sequence[int], pool: PrototypePool):
    labels = np.asarray(pseudo_labels, dtype=int)
    k_s = pool.num_source
    source_mask = labels < k_s
    novel_idx = labels[~source_mask] - k_s
    if labels.size and labels.min() < 0:
        raise UnknownLabel("negative pseudo-label")
    if novel_idx.size and novel_idx.max() >= pool.novel_count:
        raise UnknownLabel(
            f"novel prototype index {int(novel_idx.max())} outside pool of "
            f"{pool.novel_count}"
        )
    return labels, source_mask


def clustering_loss(
    features: np.ndarray,
    pseudo_labels: Sequence[int],
    pool: PrototypePool,
    temperature: float,
) -> float:
    """Mean negative log-likelihood of temperature-scaled cosine logits.

    Samples pseudo-labeled with a source class form a softmax over the
    source prototypes only. Samples pseudo-labeled with a novel prototype
    form a softmax over the source prototypes plus that one novel
    prototype, with the novel logit in the numerator.
    """
    features = np.asarray(features, dtype=float)
    if features.shape[0] == 0:
        return 0.0
    labels, source_mask = _split_labels(pseudo_labels, pool)
    protos = pool.source_matrix()
    logits_src = features @ protos.T / temperature

    total = 0.0
    if np.any(source_mask):
        rows = logits_src[source_mask]
        targets = labels[source_mask]
        total += float(np.sum(_logsumexp(rows) - rows[np.arange(rows.shape[0]), targets]))
    if np.any(~source_mask):
        rows = logits_src[~source_mask]
        novel = pool.novel_matrix()[labels[~source_mask] - pool.num_source]
        novel_logit = np.sum(features[~source_mask] * novel, axis=1) / temperature
        rows = np.hstack([rows, novel_logit[:, None]])
        total += float(np.sum(_logsumexp(rows) - novel_logit))
    return total / features.shape[0]


def clustering_loss_gradient(
    features: np.ndarray,
    pseudo_labels: Sequence[int],
    pool: PrototypePool,
    temperature: float,
    adapter: AdapterState,
    raw_inputs: np.ndarray,
) -> np.ndarray:
    """Exact gradient of clustering_loss with respect to the adapter weight.

    `features` must be the embeddings of `raw_inputs` under `adapter`;
    prototypes are treated as constants.
    """
    features = np.asarray(features, dtype=float)
    if features.shape[0] == 0:
        return np.zeros_like(adapter.weight)
    labels, source_mask = _split_labels(pseudo_labels, pool)
    protos = pool.source_matrix()
    n = features.shape[0]
    grad_features = np.zeros_like(features)

    if np.any(source_mask):
        rows = features[source_mask] @ protos.T / temperature
        soft = np.exp(rows - _logsumexp(rows)[:, None])
        soft[np.arange(soft.shape[0]), labels[source_mask]] -= 1.0
        grad_features[source_mask] = soft @ protos / temperature
    if np.any(~source_mask):
        sel = ~source_mask
        novel = pool.novel_matrix()[labels[sel] - pool.num_source]
        rows = features[sel] @ protos.T / temperature
        novel_logit = np.sum(features[sel] * novel, axis=1) / temperature
        rows = np.hstack([rows, novel_logit[:, None]])
        soft = np.exp(rows - _logsumexp(rows)[:, None])
        soft[:, -1] -= 1.0
        grad_features[sel] = (soft[:, :-1] @ protos + soft[:, -1:] * novel) / temperature

    grad_features /= n
    return _chain_to_weight(grad_features, features, adapter, raw_inputs)
