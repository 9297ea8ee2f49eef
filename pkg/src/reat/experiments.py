"""Desk-scale directional experiments on a 3-class synthetic long-tailed task."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, attack_batched
from .datasets import LabeledDataset, LongTailSpec, build_long_tailed, partition_classes, split_per_class, synthetic_gaussians
from .evalkit import ae_prediction_histogram, evaluate
from .models import ModelSpec, init_model
from .trainer import TrainConfig, run_training

DESK_EPSILON = 0.05
DESK_ATTACK = AttackConfig(epsilon=DESK_EPSILON, alpha=DESK_EPSILON / 4, steps=10)


@dataclass(frozen=True)
class DeskTask:
    """Synthetic Gaussians with per-class training counts [1000, 100, 20]."""

    counts: tuple[int, ...] = (1000, 100, 20)
    dim: int = 10
    separation: float = 0.6
    noise: float = 0.1
    test_per_class: int = 200
    data_seed: int = 0

    def build(self, seed: int) -> tuple[LabeledDataset, LabeledDataset, np.ndarray]:
        c = len(self.counts)
        source = synthetic_gaussians(c, self.dim, self.separation, self.counts[0] + self.test_per_class, self.data_seed, self.noise)
        pool, test = split_per_class(source, self.test_per_class, self.data_seed)
        spec = LongTailSpec(c, self.counts[0] / self.counts[-1], self.counts[0], seed=seed, counts=self.counts)
        train, sizes = build_long_tailed(pool, spec)
        return train, test, sizes


def desk_train_config(method: str, seed: int, **changes) -> TrainConfig:
    base = TrainConfig(
        method=method,
        lt_loss="bsl",
        epochs=30,
        batch_size=64,
        lr0=0.1,
        lam_tail=0.03,
        attack=DESK_ATTACK,
        seed=seed,
    )
    return replace(base, **changes)


def desk_model_spec(task: DeskTask, seed: int, **changes) -> ModelSpec:
    return ModelSpec(input_shape=(task.dim,), num_classes=len(task.counts), init_seed=seed, **changes)


@dataclass
class BalanceRun:
    method: str
    seed: int
    final_counts: np.ndarray
    entropy: float
    tail_robust: float
    clean_acc: np.ndarray
    robust_acc: np.ndarray


def balance_run(method: str, seed: int, task: DeskTask = DeskTask(), **cfg_changes) -> BalanceRun:
    train, test, sizes = task.build(seed)
    model = init_model(desk_model_spec(task, seed))
    cfg = desk_train_config(method, seed, **cfg_changes)
    result = run_training(cfg, model, train, sizes)
    last = result.history[-1]
    c = len(sizes)
    hist = ae_prediction_histogram(np.repeat(np.arange(c), last.ae_counts), c, last.epoch)
    pgd20 = AttackConfig(epsilon=DESK_EPSILON, alpha=DESK_EPSILON / 4, steps=20, random_start=True, seed=seed)
    report = evaluate(result.model, test, {"pgd20": pgd20})
    tail = sorted(partition_classes(c).tail)
    robust = report.attacks["pgd20"].robust_acc
    return BalanceRun(method, seed, last.ae_counts, hist.normalized_entropy, float(np.mean(robust[tail])), report.clean_acc, robust)


@dataclass
class BalanceSummary:
    runs: dict[str, list[BalanceRun]] = field(default_factory=dict)

    def entropy_wins(self) -> int:
        return sum(r.entropy > p.entropy for r, p in zip(self.runs["reat"], self.runs["pgd-at"]))

    def mean_tail_robust(self, method: str) -> float:
        return float(np.mean([r.tail_robust for r in self.runs[method]]))


def balancing_experiment(seeds=range(5), task: DeskTask = DeskTask(), **cfg_changes) -> BalanceSummary:
    """PGD-AT(BSL) against REAT(BSL): final-epoch AE entropy and tail robustness."""
    summary = BalanceSummary({"pgd-at": [], "reat": []})
    for seed in seeds:
        for method in ("pgd-at", "reat"):
            summary.runs[method].append(balance_run(method, seed, task, **cfg_changes))
    return summary


@dataclass
class ProbeRun:
    seed: int
    tau: float
    clean: float
    robust_plain: float
    robust_scaled: float


def adaptive_probe_run(seed: int, tau: float = 16.0, scale: float = 10.0, task: DeskTask = DeskTask(), lr0: float = 0.01) -> ProbeRun:
    """Adversarially train a cosine-head model, then attack it with and without logit scaling."""
    train, test, sizes = task.build(seed)
    model = init_model(desk_model_spec(task, seed, head="cosine", tau=tau))
    cfg = desk_train_config("pgd-at", seed, lr0=lr0)
    result = run_training(cfg, model, train, sizes)
    m = result.model
    pgd20 = AttackConfig(epsilon=DESK_EPSILON, alpha=DESK_EPSILON / 4, steps=20, random_start=True, seed=seed)
    plain = attack_batched(m, test.x, test.y, pgd20)
    scaled = attack_batched(m, test.x, test.y, pgd20.with_(logit_scale=scale))
    acc = lambda x: float(np.mean(m.predict(x) == test.y))  # noqa: E731
    return ProbeRun(seed, tau, acc(test.x), acc(plain), acc(scaled))
