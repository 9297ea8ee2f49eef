"""Training and attack objectives built on :mod:`reat.ndgrad`.

Every loss takes logits of shape (B, C) and 0-based integer labels and returns
a scalar tensor (the batch mean) unless noted otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

LT_KINDS = ("ce", "bsl", "fl", "en", "ldam")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else nd.constant(x)


def per_sample_ce(logits, labels) -> Tensor:
    """``-log softmax(z)[y]`` for every row."""
    return -nd.take_labels(nd.log_softmax(_t(logits), axis=1), labels)


def cross_entropy(logits, labels) -> Tensor:
    return per_sample_ce(logits, labels).mean()


def balanced_softmax(logits, labels, class_sizes) -> Tensor:
    """Cross-entropy on logits shifted by ``log N_j``.

    The shift is taken relative to the largest class, so equal class sizes add
    exactly zero and reproduce :func:`cross_entropy` bit for bit.
    """
    sizes = np.asarray(class_sizes, dtype=np.float64)
    prior = np.log(sizes) - np.log(sizes.max())
    return cross_entropy(_t(logits) + prior, labels)


def focal_loss(logits, labels, gamma: float = 2.0) -> Tensor:
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    logp = nd.take_labels(nd.log_softmax(_t(logits), axis=1), labels)
    if gamma == 0:
        return (-logp).mean()
    p = nd.exp(logp)
    return (-((1.0 - p) ** gamma) * logp).mean()


def class_balanced_weights(class_sizes) -> np.ndarray:
    """Effective-number class weights with ``beta = (sum N - 1) / sum N``, summing to C."""
    sizes = np.asarray(class_sizes, dtype=np.float64)
    total = sizes.sum()
    beta = (total - 1.0) / total
    w = (1.0 - beta) / -np.expm1(sizes * np.log(beta))
    return len(sizes) * w / w.sum()


def effective_number_loss(logits, labels, class_sizes) -> Tensor:
    w = class_balanced_weights(class_sizes)
    labels = np.asarray(labels)
    return (per_sample_ce(logits, labels) * w[labels]).mean()


def ldam_margins(class_sizes, max_margin: float = 0.5) -> np.ndarray:
    m = np.asarray(class_sizes, dtype=np.float64) ** -0.25
    return m * (max_margin / m.max())


def ldam_loss(logits, labels, class_sizes, max_margin: float = 0.5, scale: float = 1.0) -> Tensor:
    """Cross-entropy on ``scale * (z - margin_y * onehot(y))``."""
    if scale <= 0:
        raise ValueError("LDAM scale must be > 0")
    labels = np.asarray(labels)
    margins = ldam_margins(class_sizes, max_margin)
    z = _t(logits)
    shift = np.zeros(z.shape)
    shift[np.arange(len(labels)), labels] = margins[labels]
    return cross_entropy((z - shift) * scale, labels)


@dataclass(frozen=True)
class LossParams:
    gamma: float = 2.0
    ldam_max_margin: float = 0.5
    ldam_scale: float = 1.0


def lt_loss(kind: str, logits, labels, class_sizes, params: LossParams = LossParams()) -> Tensor:
    """The long-tailed recognition loss used for the parameter update."""
    if kind == "ce":
        return cross_entropy(logits, labels)
    if kind == "bsl":
        return balanced_softmax(logits, labels, class_sizes)
    if kind == "fl":
        return focal_loss(logits, labels, params.gamma)
    if kind == "en":
        return effective_number_loss(logits, labels, class_sizes)
    if kind == "ldam":
        return ldam_loss(logits, labels, class_sizes, params.ldam_max_margin, params.ldam_scale)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LT_KINDS}")


def rbl_loss(logits, labels, weights, weight_index=None) -> Tensor:
    """Re-balancing loss: per-sample ``w[k] * CE``, batch mean.

    ``k`` is the true label unless ``weight_index`` (e.g. the current
    prediction) is given.
    """
    idx = np.asarray(labels if weight_index is None else weight_index)
    w = np.asarray(weights, dtype=np.float64)[idx]
    return (per_sample_ce(logits, labels) * w).mean()


def kld_matrix(prob_features, log_prob_features=None) -> Tensor:
    """``K[i, j] = KL(p_j || p_i) = sum_k p_jk (log p_jk - log p_ik)``."""
    p = _t(prob_features)
    logp = nd.log(p) if log_prob_features is None else _t(log_prob_features)
    neg_entropy = (p * logp).sum(axis=1)  # (B,)
    cross = logp @ p.T  # [i, j] = sum_k log p_ik * p_jk
    return neg_entropy.reshape(1, -1) - cross


def tail_regularizer(prob_features, labels, omega, tail_classes, log_prob_features=None) -> Tensor:
    """Feature-margin penalty mined from tail-class samples.

    For each tail sample ``i`` the batch average of
    ``sign_ij * (omega_i + omega_j) * KL(p_j || p_i)`` is subtracted, where
    ``sign_ij`` is -1 for same-class pairs and +1 otherwise; the total is
    divided by the number of tail samples (0 when there are none).

    Pass ``log_prob_features`` (a log-softmax of the same features) to avoid
    taking the log of underflowed probabilities.
    """
    p = _t(prob_features)
    if log_prob_features is None and np.any(p.data <= 0):
        raise ValueError("probabilistic features must be strictly positive")
    labels = np.asarray(labels, dtype=np.int64)
    tail_mask = np.isin(labels, np.fromiter(tail_classes, dtype=np.int64))
    n_tail = int(tail_mask.sum())
    if n_tail == 0:
        return nd.constant(0.0)
    b = len(labels)
    om = np.asarray(omega, dtype=np.float64)[labels]
    same = labels[:, None] == labels[None, :]
    coef = np.where(same, -1.0, 1.0) * (om[:, None] + om[None, :])
    coef = coef * tail_mask[:, None] * (-1.0 / (b * n_tail))
    return (kld_matrix(p, log_prob_features) * coef).sum()


def total_loss(
    kind: str,
    logits,
    prob_features,
    labels,
    class_sizes,
    omega,
    tail_classes,
    lam: float = 1.0,
    params: LossParams = LossParams(),
    log_prob_features=None,
) -> Tensor:
    """``L_lt + lam * TAIL``; the regularizer is skipped entirely when ``lam == 0``."""
    if lam < 0:
        raise ValueError("TAIL coefficient must be >= 0")
    base = lt_loss(kind, logits, labels, class_sizes, params)
    if lam == 0:
        return base
    return base + tail_regularizer(prob_features, labels, omega, tail_classes, log_prob_features) * lam
