"""Trainable feature map: a linear adapter followed by unit normalization.

The adapter owns the only parameters updated during test-time training.
Everything downstream (prototypes, scores, losses) consumes the unit-norm
embeddings it produces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbedding, NonFiniteGradient

# Below this output norm the adapter is considered collapsed and the run
# aborts instead of silently renormalizing noise.
NORM_EPS = 1e-12


@dataclass
class AdapterState:
    """Adapter weights plus SGD-momentum optimizer slots."""

    weight: np.ndarray          # (feature_dim, input_dim)
    momentum_buffer: np.ndarray  # same shape as weight
    learning_rate: float
    momentum_coeff: float

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "AdapterState":
        return AdapterState(
            weight=self.weight.copy(),
            momentum_buffer=self.momentum_buffer.copy(),
            learning_rate=self.learning_rate,
            momentum_coeff=self.momentum_coeff,
        )


def init_adapter(
    feature_dim: int,
    input_dim: int,
    learning_rate: float,
    momentum_coeff: float = 0.9,
    seed: int = 0,
    noise_scale: float = 0.01,
) -> AdapterState:
    """Identity map padded/truncated to shape, plus small uniform noise.

    Starting near the raw feature geometry keeps source prototypes
    meaningful before any adaptation step has run.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA]))
    weight = np.zeros((feature_dim, input_dim))
    k = min(feature_dim, input_dim)
    weight[:k, :k] = np.eye(k)
    weight += rng.uniform(-noise_scale, noise_scale, size=weight.shape)
    return AdapterState(
        weight=weight,
        momentum_buffer=np.zeros_like(weight),
        learning_rate=learning_rate,
        momentum_coeff=momentum_coeff,
    )


def embed(values: np.ndarray, adapter: AdapterState) -> np.ndarray:
    """Map one raw input vector to a unit-norm feature."""
    raw = adapter.weight @ np.asarray(values, dtype=float)
    norm = np.linalg.norm(raw)
    if norm < NORM_EPS:
        raise DegenerateEmbedding(f"embedding norm {norm:.3e} below {NORM_EPS:.0e}")
    return raw / norm


def embed_batch(values: np.ndarray, adapter: AdapterState) -> np.ndarray:
    """Map a batch of raw inputs (rows) to unit-norm features (rows)."""
    raw = np.asarray(values, dtype=float) @ adapter.weight.T
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms < NORM_EPS):
        bad = int(np.argmin(norms))
        raise DegenerateEmbedding(
            f"embedding norm {norms[bad]:.3e} below {NORM_EPS:.0e} at row {bad}"
        )
    return raw / norms[:, None]


def sgd_momentum_step(adapter: AdapterState, gradient: np.ndarray) -> AdapterState:
    """One classical-momentum step: buffer accumulates, weight moves against it."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != adapter.weight.shape:
        raise ValueError(
            f"gradient shape {gradient.shape} != weight shape {adapter.weight.shape}"
        )
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteGradient("gradient contains NaN or inf entries")
    buffer = adapter.momentum_coeff * adapter.momentum_buffer + gradient
    weight = adapter.weight - adapter.learning_rate * buffer
    return AdapterState(
        weight=weight,
        momentum_buffer=buffer,
        learning_rate=adapter.learning_rate,
        momentum_coeff=adapter.momentum_coeff,
    )
