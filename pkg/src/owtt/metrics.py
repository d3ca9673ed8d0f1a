"""Open-set evaluation: known-class accuracy, rejection accuracy, harmonic mean.

Hidden labels below the known-class count mark weak-OOD samples (to be
classified); labels at or above it mark strong-OOD samples (to be
rejected). Absent populations report None rather than 0 so a clean stream
is distinguishable from a detector that rejected nothing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyRecords, MissingPopulation

# Sentinel predicted label for samples rejected as strong OOD.
REJECT = -1


@dataclass
class MetricsReport:
    acc_s: Optional[float]
    acc_n: Optional[float]
    acc_h: Optional[float]
    n_weak: int
    n_strong: int
    per_batch_trace: List[Tuple[int, Optional[float], Optional[float], Optional[float]]] = field(
        default_factory=list
    )


def harmonic_mean(acc_s: float, acc_n: float) -> float:
    if acc_s + acc_n <= 0.0:
        return 0.0
    return 2.0 * acc_s * acc_n / (acc_s + acc_n)


class RunningMetrics:
    """O(1) cumulative counters over a stream of prediction records."""

    def __init__(self, num_known: int):
        self.num_known = num_known
        self.n_weak = 0
        self.n_weak_correct = 0
        self.n_strong = 0
        self.n_strong_rejected = 0

    def update(self, records: Sequence) -> None:
        for rec in records:
            if rec.hidden_label < self.num_known:
                self.n_weak += 1
                if rec.predicted_label == rec.hidden_label:
                    self.n_weak_correct += 1
            else:
                self.n_strong += 1
                if rec.predicted_label == REJECT:
                    self.n_strong_rejected += 1

    def snapshot(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        acc_s = self.n_weak_correct / self.n_weak if self.n_weak else None
        acc_n = self.n_strong_rejected / self.n_strong if self.n_strong else None
        acc_h = None if acc_s is None or acc_n is None else harmonic_mean(acc_s, acc_n)
        return acc_s, acc_n, acc_h


def compute_metrics(records: Sequence, num_known: int) -> MetricsReport:
    """Whole-run accuracies from a prediction log."""
    if not records:
        raise EmptyRecords("no prediction records")
    running = RunningMetrics(num_known)
    running.update(records)
    acc_s, acc_n, acc_h = running.snapshot()
    return MetricsReport(
        acc_s=acc_s,
        acc_n=acc_n,
        acc_h=acc_h,
        n_weak=running.n_weak,
        n_strong=running.n_strong,
    )


def cumulative_trace(records: Sequence, num_known: int):
    """Per-batch cumulative (batch, acc_s, acc_n, acc_h) rows.

    Records must arrive in stream order (consecutive timestamps grouped).
    """
    if not records:
        raise EmptyRecords("no prediction records")
    running = RunningMetrics(num_known)
    trace = []
    current_batch = records[0].timestamp
    pending = []
    for rec in records:
        if rec.timestamp != current_batch:
            running.update(pending)
            trace.append((current_batch, *running.snapshot()))
            pending = []
            current_batch = rec.timestamp
        pending.append(rec)
    running.update(pending)
    trace.append((current_batch, *running.snapshot()))
    return trace


def score_separation(records: Sequence, num_known: int) -> Tuple[float, float, float]:
    """Mean scores of the weak and strong populations and their gap (strong - weak)."""
    if not records:
        raise EmptyRecords("no prediction records")
    weak = [r.ood_score for r in records if r.hidden_label < num_known]
    strong = [r.ood_score for r in records if r.hidden_label >= num_known]
    if not weak or not strong:
        raise MissingPopulation("need both weak and strong samples")
    mean_weak = float(np.mean(weak))
    mean_strong = float(np.mean(strong))
    return mean_weak, mean_strong, mean_strong - mean_weak


def score_histogram(records: Sequence, num_known: int, bins: int = 64):
    """Score histograms over [0, 1] split by hidden population.

    Returns (edges, weak_counts, strong_counts); edges has bins + 1 entries.
    """
    if not records:
        raise EmptyRecords("no prediction records")
    edges = np.linspace(0.0, 1.0, bins + 1)
    weak = np.array([r.ood_score for r in records if r.hidden_label < num_known])
    strong = np.array([r.ood_score for r in records if r.hidden_label >= num_known])
    weak_counts, _ = np.histogram(weak, bins=edges)
    strong_counts, _ = np.histogram(strong, bins=edges)
    return edges, weak_counts, strong_counts
