"""Projected gradient attacks (l-inf / l2) with CE, RBL and CW objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ndgrad as nd
from .losses import per_sample_ce
from .models import Model, forward

NORMS = ("linf", "l2")
OBJECTIVES = ("ce", "rbl", "cw")
STEP_RULES = ("sign", "weighted-sign")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    objective: str = "ce"
    step_rule: str = "sign"
    logit_scale: float = 1.0
    random_start: bool = False
    seed: int = 0
    weight_by: str = "label"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if self.weight_by not in ("label", "prediction"):
            raise ValueError(f"weight_by must be 'label' or 'prediction', got {self.weight_by!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.alpha <= 0:
            raise ValueError("alpha must be > 0 when steps > 0")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


def cw_objective(logits, labels) -> nd.Tensor:
    """Per-sample margin ``max_{j != y} z_j - z_y`` (confidence 0)."""
    z = logits if isinstance(logits, nd.Tensor) else nd.constant(logits)
    if z.shape[1] < 2:
        raise ValueError("CW margin needs at least 2 classes")
    return nd.max_other(z, labels) - nd.take_labels(z, labels)


def _objective(logits, y, cfg: AttackConfig, weights):
    if cfg.logit_scale != 1.0:
        logits = logits * cfg.logit_scale
    if cfg.objective == "cw":
        return cw_objective(logits, y).sum()
    ce = per_sample_ce(logits, y)
    if cfg.objective == "rbl":
        idx = y if cfg.weight_by == "label" else logits.data.argmax(axis=1)
        return (ce * weights[idx]).sum()
    return ce.sum()


def _project(x_adv: np.ndarray, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    delta = x_adv - x
    if cfg.norm == "linf":
        delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    else:
        flat = delta.reshape(len(delta), -1)
        norms = np.linalg.norm(flat, axis=1)
        factor = np.minimum(1.0, cfg.epsilon / np.maximum(norms, 1e-300))
        delta = (flat * factor[:, None]).reshape(delta.shape)
    return np.clip(x + delta, 0.0, 1.0)


def _random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.norm == "linf":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        flat = rng.standard_normal((len(x), x[0].size))
        flat /= np.linalg.norm(flat, axis=1, keepdims=True)
        radius = cfg.epsilon * rng.random(len(x)) ** (1.0 / flat.shape[1])
        delta = (flat * radius[:, None]).reshape(x.shape)
    return _project(x + delta, x, cfg)


def _bshape(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def pgd_attack(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    weights=None,
    stream: int = 0,
) -> np.ndarray:
    """Maximise the configured objective inside the ``epsilon`` ball around ``x``.

    ``weights`` (length C) drives the RBL objective and the ``weighted-sign``
    step rule; it defaults to all ones.  ``stream`` selects an independent
    random-start stream, e.g. the batch index.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.ones(model.spec.num_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    if cfg.epsilon == 0 or cfg.steps == 0:
        if cfg.random_start and cfg.epsilon > 0:
            return _random_start(x, cfg, np.random.default_rng([cfg.seed, stream]))
        return x.copy()
    x_adv = _random_start(x, cfg, np.random.default_rng([cfg.seed, stream])) if cfg.random_start else x.copy()
    for step in range(cfg.steps):
        leaf = nd.tensor(x_adv)
        try:
            logits = forward(model, leaf).logits
            (g,) = nd.backward(_objective(logits, y, cfg, w), [leaf])
        except nd.NonFiniteError as exc:
            raise AttackError(f"non-finite gradient at PGD step {step}: {exc}") from exc
        if cfg.norm == "linf":
            direction = np.sign(g)
        else:
            norms = np.linalg.norm(g.reshape(len(g), -1), axis=1)
            direction = g / _bshape(np.maximum(norms, 1e-12), g.ndim)
        if cfg.step_rule == "weighted-sign":
            idx = y if cfg.weight_by == "label" else logits.data.argmax(axis=1)
            direction = direction * _bshape(w[idx], g.ndim)
        x_adv = _project(x_adv + cfg.alpha * direction, x, cfg)
    return x_adv


def adaptive_scale_attack(model: Model, x, y, cfg: AttackConfig, scale: float = 10.0, **kwargs) -> np.ndarray:
    """PGD whose objective sees ``scale * logits``; evaluate the result on the plain model."""
    return pgd_attack(model, x, y, cfg.with_(logit_scale=scale), **kwargs)


def attack_batched(model: Model, x, y, cfg: AttackConfig, batch_size: int = 500, weights=None) -> np.ndarray:
    """Run :func:`pgd_attack` over fixed-size slices; slice ``k`` uses stream ``k``."""
    out = [
        pgd_attack(model, x[s : s + batch_size], y[s : s + batch_size], cfg, weights=weights, stream=k)
        for k, s in enumerate(range(0, len(x), batch_size))
    ]
    return np.concatenate(out) if out else np.asarray(x, dtype=np.float64).copy()


# Named suites used for evaluation.
PGD20 = AttackConfig(steps=20, random_start=True)
PGD100 = AttackConfig(steps=100, random_start=True)
CW100 = AttackConfig(steps=100, objective="cw", random_start=True)
L2_PGD20 = AttackConfig(norm="l2", epsilon=1.0, alpha=0.2, steps=20, random_start=True)
