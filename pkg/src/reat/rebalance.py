"""Per-epoch AE prediction counts and the class weights derived from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PredictionCounter:
    """Counts of adversarial examples predicted into each class.

    Counters for disjoint slices of an epoch can be merged with ``+``.
    """

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros(num_classes, dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)

    def record(self, predicted) -> "PredictionCounter":
        predicted = np.asarray(predicted, dtype=np.int64)
        if predicted.size and (predicted.min() < 0 or predicted.max() >= self.num_classes):
            raise ValueError(f"predicted label outside 0..{self.num_classes - 1}")
        self.counts += np.bincount(predicted, minlength=self.num_classes)
        return self

    def reset(self) -> None:
        self.counts[:] = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "PredictionCounter") -> "PredictionCounter":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counters over different class sets")
        return PredictionCounter(self.num_classes, self.counts + other.counts)


@dataclass(frozen=True)
class EffectiveNumbers:
    beta: np.ndarray
    values: np.ndarray


def effective_numbers(n, class_sizes, smoothing: int = 1) -> EffectiveNumbers:
    """``E_i = (1 - beta_i**n_i) / (1 - beta_i)`` with ``beta_i = (N_i - 1) / N_i``.

    ``n`` is Laplace-smoothed by ``smoothing`` so that classes that received no
    predictions still have a finite weight.
    """
    sizes = np.asarray(class_sizes, dtype=np.float64)
    if np.any(sizes < 1):
        raise ValueError("class sizes must be >= 1")
    counts = np.asarray(n, dtype=np.float64) + smoothing
    beta = (sizes - 1.0) / sizes
    # geometric series sum_{k<n} beta**k = N (1 - beta**n), using 1 - beta = 1/N;
    # for N_i = 1 (beta = 0) this is 1
    log_beta = np.log1p(-1.0 / sizes, where=sizes > 1, out=np.full_like(sizes, -np.inf))
    values = -np.expm1(counts * log_beta) * sizes
    # exact arithmetic gives 1 <= E <= N for n >= 1; clip away last-bit rounding
    values = np.clip(values, np.where(counts >= 1, 1.0, 0.0), sizes)
    return EffectiveNumbers(beta, values)


def rbl_weights(effective) -> np.ndarray:
    """``w_i = C / (E_i * sum_j 1/E_j)``; the weights sum to C."""
    e = effective.values if isinstance(effective, EffectiveNumbers) else np.asarray(effective, dtype=np.float64)
    inv = 1.0 / e
    return len(e) * inv / inv.sum()


def omega_weights(class_sizes) -> np.ndarray:
    """Smoothed inverse class frequency ``sqrt(sum_j N_j / N_i)``."""
    sizes = np.asarray(class_sizes, dtype=np.float64)
    if np.any(sizes < 1):
        raise ValueError("class sizes must be >= 1")
    return np.sqrt(sizes.sum() / sizes)


def weights_from_counts(n, class_sizes, smoothing: int = 1) -> np.ndarray:
    return rbl_weights(effective_numbers(n, class_sizes, smoothing))
