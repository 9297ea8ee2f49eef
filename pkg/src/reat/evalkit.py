"""Per-class clean/robust evaluation, AE histograms and the robust-risk bound."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, attack_batched
from .datasets import LabeledDataset
from .models import Model, forward


@dataclass
class AttackResult:
    config: AttackConfig
    adv_pred: np.ndarray
    robust_acc: np.ndarray  # per class
    flip_rate: np.ndarray  # per class, F(x_adv) != F(x)


@dataclass
class EvalReport:
    num_classes: int
    class_sizes: np.ndarray
    labels: np.ndarray
    clean_pred: np.ndarray
    clean_acc: np.ndarray
    attacks: dict[str, AttackResult] = field(default_factory=dict)

    def balanced_clean(self) -> float:
        return float(np.mean(self.clean_acc))

    def weighted_clean(self) -> float:
        return float(np.mean(self.clean_pred == self.labels))

    def balanced_robust(self, name: str) -> float:
        return float(np.mean(self.attacks[name].robust_acc))

    def weighted_robust(self, name: str) -> float:
        return float(np.mean(self.attacks[name].adv_pred == self.labels))

    def bound(self, name: str, mode: str = "normalized") -> "RobustRiskBound":
        res = self.attacks[name]
        if mode == "normalized":
            return robust_risk_lower_bound(1.0 - self.clean_acc, res.flip_rate, self.num_classes, mode)
        wrong = np.bincount(self.labels[self.clean_pred != self.labels], minlength=self.num_classes)
        flips = np.bincount(self.labels[res.adv_pred != self.clean_pred], minlength=self.num_classes)
        return robust_risk_lower_bound(wrong, flips, self.num_classes, mode)

    def to_dict(self) -> dict:
        out = {
            "num_classes": self.num_classes,
            "class_sizes": self.class_sizes.tolist(),
            "clean_acc": self.clean_acc.tolist(),
            "clean_acc_balanced": self.balanced_clean(),
            "clean_acc_weighted": self.weighted_clean(),
            "attacks": {},
        }
        for name, res in self.attacks.items():
            b = self.bound(name)
            out["attacks"][name] = {
                "config": res.config.to_dict(),
                "robust_acc": res.robust_acc.tolist(),
                "flip_rate": res.flip_rate.tolist(),
                "robust_acc_balanced": self.balanced_robust(name),
                "robust_acc_weighted": self.weighted_robust(name),
                "robust_risk_lower_bound": {
                    "mode": b.mode,
                    "value": b.value,
                    "note": "empirical estimate; the worst-case perturbation is approximated by this attack",
                },
            }
        return out


def _per_class_mean(hit: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    sizes = np.bincount(labels, minlength=num_classes)
    hits = np.bincount(labels, weights=hit.astype(np.float64), minlength=num_classes)
    return np.divide(hits, sizes, out=np.zeros(num_classes), where=sizes > 0)


def predict(model: Model, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return model.predict(x, batch_size)


def evaluate(model: Model, data: LabeledDataset, attacks: dict[str, AttackConfig], batch_size: int = 500) -> EvalReport:
    c = data.num_classes
    clean_pred = predict(model, data.x)
    report = EvalReport(
        num_classes=c,
        class_sizes=data.class_counts(),
        labels=data.y,
        clean_pred=clean_pred,
        clean_acc=_per_class_mean(clean_pred == data.y, data.y, c),
    )
    for name, cfg in attacks.items():
        x_adv = attack_batched(model, data.x, data.y, cfg, batch_size=batch_size)
        adv_pred = predict(model, x_adv)
        report.attacks[name] = AttackResult(
            config=cfg,
            adv_pred=adv_pred,
            robust_acc=_per_class_mean(adv_pred == data.y, data.y, c),
            flip_rate=_per_class_mean(adv_pred != clean_pred, data.y, c),
        )
    return report


def union_bound_holds(labels, clean_pred, adv_pred) -> np.ndarray:
    """Per-sample ``1[F(x') != y] <= 1[F(x) != y] + 1[F(x') != F(x)]``."""
    labels, clean_pred, adv_pred = map(np.asarray, (labels, clean_pred, adv_pred))
    robust_err = (adv_pred != labels).astype(int)
    return robust_err <= (clean_pred != labels).astype(int) + (adv_pred != clean_pred).astype(int)


@dataclass(frozen=True)
class RobustRiskBound:
    clean_err: np.ndarray
    flip: np.ndarray
    value: float
    mode: str


def robust_risk_lower_bound(clean_errs, flips, num_classes: int, mode: str = "normalized") -> RobustRiskBound:
    """``(1/C) * sum_i (clean_err_i + flip_i)``.

    In ``normalized`` mode the inputs are per-class rates; in ``raw`` mode they
    are per-class counts, so the result is a mean count rather than a rate.
    """
    if mode not in ("normalized", "raw"):
        raise ValueError(f"mode must be 'normalized' or 'raw', got {mode!r}")
    ce = np.asarray(clean_errs, dtype=np.float64)
    fl = np.asarray(flips, dtype=np.float64)
    value = float((ce.sum() + fl.sum()) / num_classes)
    return RobustRiskBound(ce, fl, value, mode)


@dataclass(frozen=True)
class AeHistogram:
    counts: np.ndarray
    epoch: int | None = None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def entropy(self) -> float:
        p = self.counts[self.counts > 0] / self.counts.sum()
        return float(-(p * np.log(p)).sum()) if p.size else 0.0

    @property
    def normalized_entropy(self) -> float:
        return self.entropy / math.log(len(self.counts))


def ae_prediction_histogram(predicted, num_classes: int, epoch: int | None = None) -> AeHistogram:
    return AeHistogram(np.bincount(np.asarray(predicted, dtype=np.int64), minlength=num_classes), epoch)


def histogram_for(model: Model, aes: np.ndarray, epoch: int | None = None) -> AeHistogram:
    return ae_prediction_histogram(predict(model, aes), model.spec.num_classes, epoch)


def consecutive_ae_distances(prev: dict, cur: dict, labels: dict) -> dict[int, list[float]]:
    """l2 distance between the two epochs' AEs of each sample, grouped by true class."""
    if prev.keys() != cur.keys():
        missing = sorted(set(prev) ^ set(cur))[:5]
        raise KeyError(f"sample ids differ between epochs, e.g. {missing}")
    out: dict[int, list[float]] = {}
    for sid in sorted(cur):
        d = float(np.linalg.norm((np.asarray(cur[sid]) - np.asarray(prev[sid])).ravel()))
        out.setdefault(int(labels[sid]), []).append(d)
    return out


def export_features(model: Model, data: LabeledDataset, path, batch_size: int = 1000) -> int:
    """CSV of (sample id, true label, feature values, predicted label)."""
    k = model.spec.feature_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"f{i}" for i in range(k)] + ["pred"])
        for start in range(0, len(data), batch_size):
            out = forward(model, data.x[start : start + batch_size])
            pred = out.logits.data.argmax(axis=1)
            for off, (feat, p) in enumerate(zip(out.features.data, pred)):
                sid = start + off
                writer.writerow([sid, int(data.y[sid])] + [repr(float(v)) for v in feat] + [int(p)])
    return len(data)


CLASS_METRIC_BASE = ["epoch", "split", "class", "clean_acc"]
CLASS_METRIC_TAIL = ["ae_count", "w", "E", "omega", "entropy"]


def class_metric_columns(attack_names) -> list[str]:
    return (
        CLASS_METRIC_BASE
        + [f"robust_acc@{a}" for a in attack_names]
        + [f"flip_rate@{a}" for a in attack_names]
        + CLASS_METRIC_TAIL
    )


def class_metric_rows(epoch, split, report: EvalReport | None, histogram: AeHistogram | None, w, e, omega, c: int):
    """One dict per class in the per-class metrics CSV layout."""
    rows = []
    for cls in range(c):
        row = {"epoch": epoch, "split": split, "class": cls}
        row["clean_acc"] = float(report.clean_acc[cls]) if report else ""
        if report:
            for name, res in report.attacks.items():
                row[f"robust_acc@{name}"] = float(res.robust_acc[cls])
                row[f"flip_rate@{name}"] = float(res.flip_rate[cls])
        row["ae_count"] = int(histogram.counts[cls]) if histogram is not None else ""
        row["w"] = float(w[cls]) if w is not None else ""
        row["E"] = float(e[cls]) if e is not None else ""
        row["omega"] = float(omega[cls]) if omega is not None else ""
        row["entropy"] = histogram.normalized_entropy if histogram is not None else ""
        rows.append(row)
    return rows


def write_report_json(report: EvalReport, path, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
