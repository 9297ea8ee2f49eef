"""Adversarial training loop: PGD-AT baseline and the re-balanced variant."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndgrad as nd
from .attacks import AttackConfig, attack_batched, pgd_attack
from .datasets import LabeledDataset, augment, partition_classes
from .evalkit import (
    ae_prediction_histogram,
    class_metric_columns,
    class_metric_rows,
    consecutive_ae_distances,
    evaluate,
)
from .losses import LT_KINDS, LossParams, total_loss
from .models import Model, differentiable_params, forward, save_checkpoint
from .rebalance import PredictionCounter, effective_numbers, omega_weights, rbl_weights

log = logging.getLogger(__name__)

METHODS = ("pgd-at", "reat")
EPOCH_COLUMNS = [
    "epoch",
    "lr",
    "loss",
    "ae_total",
    "ae_entropy",
    "probe_clean_acc",
    "probe_robust_acc",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "reat"
    lt_loss: str = "bsl"
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.1
    decay_points: tuple[float, ...] = (0.75, 0.9375)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lam_tail: float = 1.0
    attack: AttackConfig = AttackConfig()
    reat_step_rule: str = "weighted-sign"
    rbl_weights: str = "dynamic"
    loss_params: LossParams = LossParams()
    seed: int = 0
    probe_size: int = 500
    probe_steps: int = 10
    augment_flip: bool = False
    augment_pad: int = 0
    track_ae_distances: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(float(v) for v in self.decay_points))
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lt_loss not in LT_KINDS:
            raise ValueError(f"lt_loss must be one of {LT_KINDS}, got {self.lt_loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if any(not 0 < d < 1 for d in self.decay_points) or list(self.decay_points) != sorted(self.decay_points):
            raise ValueError(f"decay_points must be ascending fractions in (0, 1): {self.decay_points}")
        if self.lam_tail < 0:
            raise ValueError("lam_tail must be >= 0")
        if self.rbl_weights not in ("dynamic", "uniform"):
            raise ValueError("rbl_weights must be 'dynamic' or 'uniform'")
        if self.reat_step_rule not in ("sign", "weighted-sign"):
            raise ValueError("reat_step_rule must be 'sign' or 'weighted-sign'")

    def generation_attack(self) -> AttackConfig:
        if self.method == "pgd-at":
            return replace(self.attack, objective="ce", step_rule="sign")
        return replace(self.attack, objective="rbl", step_rule=self.reat_step_rule)

    def probe_attack(self) -> AttackConfig:
        return replace(self.attack, objective="ce", step_rule="sign", steps=self.probe_steps, random_start=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        return d


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for frac in cfg.decay_points if epoch >= frac * cfg.epochs)
    return cfg.lr0 * cfg.decay_factor**passed


@dataclass
class TrainState:
    model: Model
    class_sizes: np.ndarray
    weights: np.ndarray  # frozen RBL weights for the current epoch
    counter: PredictionCounter
    velocity: dict[str, np.ndarray]
    rng: np.random.Generator
    epoch: int = 0
    prev_aes: dict | None = None

    def rng_digest(self) -> str:
        state = json.dumps(self.rng.bit_generator.state, sort_keys=True, default=str)
        return hashlib.sha256(state.encode()).hexdigest()[:16]


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    ae_counts: np.ndarray
    weights_used: np.ndarray
    next_weights: np.ndarray
    effective: np.ndarray
    ae_distances: dict | None = None


def init_state(model: Model, class_sizes, cfg: TrainConfig) -> TrainState:
    sizes = np.asarray(class_sizes, dtype=np.int64)
    c = model.spec.num_classes
    if cfg.rbl_weights == "uniform":
        w = np.ones(c)
    else:
        # first epoch: clean class sizes act as the prediction counts
        w = rbl_weights(effective_numbers(sizes, sizes))
    return TrainState(
        model=model,
        class_sizes=sizes,
        weights=w,
        counter=PredictionCounter(c),
        velocity={k: np.zeros_like(v) for k, v in model.params.items()},
        rng=np.random.default_rng(cfg.seed),
    )


def train_epoch(state: TrainState, data: LabeledDataset, cfg: TrainConfig) -> EpochStats:
    model = state.model
    c = model.spec.num_classes
    tail = partition_classes(c).tail
    omega = omega_weights(state.class_sizes)
    gen = cfg.generation_attack()
    lam = cfg.lam_tail if cfg.method == "reat" else 0.0
    lr = lr_at_epoch(cfg, state.epoch)
    w = state.weights
    order = state.rng.permutation(len(data))
    track = cfg.track_ae_distances
    aes = {} if track else None
    losses = []
    for b, start in enumerate(range(0, len(data), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        x, y = data.x[idx], data.y[idx]
        if cfg.augment_flip or cfg.augment_pad:
            x = augment(x, state.rng, cfg.augment_flip, cfg.augment_pad)
        x_adv = pgd_attack(model, x, y, gen, weights=w, stream=state.epoch * 1_000_003 + b)
        if track:
            aes.update(zip(idx.tolist(), x_adv))
        params = differentiable_params(model)
        try:
            out = forward(model, x_adv, params)
            state.counter.record(out.logits.data.argmax(axis=1))
            loss = total_loss(
                cfg.lt_loss, out.logits, out.prob_features, y, state.class_sizes, omega, tail, lam, cfg.loss_params,
                out.log_prob_features,
            )
            grads = nd.backward(loss, list(params.values()))
        except (nd.NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(f"non-finite loss at epoch {state.epoch} batch {b}: {exc}") from exc
        losses.append(loss.item())
        for (name, p), g in zip(model.params.items(), grads):
            g = g + cfg.weight_decay * p
            v = state.velocity[name]
            v *= cfg.momentum
            v += g
            model.params[name] = p - lr * v
    counts = state.counter.counts.copy()
    e = effective_numbers(counts, state.class_sizes).values
    next_w = np.ones(c) if cfg.rbl_weights == "uniform" else rbl_weights(e)
    distances = None
    if track:
        if state.prev_aes is not None:
            labels = dict(zip(range(len(data)), data.y.tolist()))
            distances = consecutive_ae_distances(state.prev_aes, aes, labels)
        state.prev_aes = aes
    stats = EpochStats(state.epoch, lr, float(np.mean(losses)) if losses else 0.0, counts, w, next_w, e, distances)
    state.weights = next_w
    state.counter.reset()
    state.epoch += 1
    return stats


@dataclass
class TrainResult:
    model: Model
    best_epoch: int
    best_probe_robust: float
    history: list[EpochStats] = field(default_factory=list)
    probe_robust: list[float] = field(default_factory=list)
    best_params: dict | None = None


def _probe_subset(probe: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    if len(probe) <= size:
        return probe
    idx = np.sort(np.random.default_rng([seed, 7]).permutation(len(probe))[:size])
    return probe.subset(idx)


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_training(
    cfg: TrainConfig,
    model: Model,
    train: LabeledDataset,
    class_sizes,
    probe: LabeledDataset | None = None,
    out_dir=None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, keeping the most robust model on the probe set.

    When ``out_dir`` is given, writes ``init.ckpt``, ``best.ckpt``,
    ``final.ckpt``, ``metrics.csv`` (one row per epoch), ``class_metrics.csv``
    (one row per epoch and class), ``timing.csv`` and, if tracked,
    ``ae_distances.csv``.
    """
    state = init_state(model, class_sizes, cfg)
    c = model.spec.num_classes
    omega = omega_weights(state.class_sizes)
    probe_set = _probe_subset(probe, cfg.probe_size, cfg.seed) if probe is not None else None
    probe_attacks = {"pgd10": cfg.probe_attack()}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(out_dir, "init.ckpt"), epoch=0, rng_digest=state.rng_digest())
    result = TrainResult(model=model, best_epoch=0, best_probe_robust=-1.0)
    epoch_rows, class_rows, timing_rows, dist_rows = [], [], [], []
    best_params = model.copy().params
    for _ in range(cfg.epochs):
        tic = time.perf_counter()
        stats = train_epoch(state, train, cfg)
        train_seconds = time.perf_counter() - tic
        hist = ae_prediction_histogram(np.repeat(np.arange(c), stats.ae_counts), c, stats.epoch)
        report = evaluate(model, probe_set, probe_attacks) if probe_set is not None else None
        robust = report.weighted_robust("pgd10") if report else float("nan")
        result.history.append(stats)
        result.probe_robust.append(robust)
        if report is not None and robust > result.best_probe_robust:
            result.best_probe_robust = robust
            result.best_epoch = stats.epoch + 1
            best_params = model.copy().params
            if out_dir is not None:
                save_checkpoint(model, os.path.join(out_dir, "best.ckpt"), epoch=stats.epoch + 1, rng_digest=state.rng_digest())
        epoch_rows.append(
            {
                "epoch": stats.epoch + 1,
                "lr": stats.lr,
                "loss": stats.loss,
                "ae_total": int(stats.ae_counts.sum()),
                "ae_entropy": hist.normalized_entropy,
                "probe_clean_acc": report.weighted_clean() if report else "",
                "probe_robust_acc": robust if report else "",
            }
        )
        class_rows += class_metric_rows(stats.epoch + 1, "train", None, hist, stats.weights_used, stats.effective, omega, c)
        if report is not None:
            class_rows += class_metric_rows(stats.epoch + 1, "probe", report, None, None, None, None, c)
        timing_rows.append({"epoch": stats.epoch + 1, "train_seconds": train_seconds})
        if stats.ae_distances:
            for cls, ds in sorted(stats.ae_distances.items()):
                dist_rows.append(
                    {"epoch": stats.epoch + 1, "class": cls, "count": len(ds), "mean": float(np.mean(ds)), "median": float(np.median(ds))}
                )
        log.info("epoch %d lr %.4g loss %.4f entropy %.3f probe %.3f", stats.epoch + 1, stats.lr, stats.loss, hist.normalized_entropy, robust)
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "final.ckpt"), epoch=cfg.epochs, rng_digest=state.rng_digest())
        if cfg.epochs and probe_set is None:
            save_checkpoint(model, os.path.join(out_dir, "best.ckpt"), epoch=cfg.epochs, rng_digest=state.rng_digest())
        _write_csv(os.path.join(out_dir, "metrics.csv"), EPOCH_COLUMNS, epoch_rows)
        _write_csv(os.path.join(out_dir, "class_metrics.csv"), class_metric_columns(probe_attacks), class_rows)
        _write_csv(os.path.join(out_dir, "timing.csv"), ["epoch", "train_seconds"], timing_rows)
        if dist_rows:
            _write_csv(os.path.join(out_dir, "ae_distances.csv"), ["epoch", "class", "count", "mean", "median"], dist_rows)
    result.best_params = best_params
    return result


def probe_robust_accuracy(model: Model, probe: LabeledDataset, cfg: TrainConfig) -> float:
    x_adv = attack_batched(model, probe.x, probe.y, cfg.probe_attack())
    return float(np.mean(model.predict(x_adv) == probe.y))
