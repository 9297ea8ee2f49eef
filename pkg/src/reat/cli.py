"""``reat`` command line: data, train, eval and report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .attacks import AttackError
from .datasets import DatasetError, LabeledDataset, build_long_tailed, load_source, partition_classes, split_per_class
from .evalkit import ae_prediction_histogram, class_metric_columns, class_metric_rows, evaluate, export_features, write_report_json
from .models import CheckpointError, ModelError, init_model, load_checkpoint
from .ndgrad import NonFiniteError
from .rebalance import omega_weights
from .trainer import TrainingError, run_training

log = logging.getLogger("reat")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_ABORTED = 4


def prepare_data(cfg: cfgmod.RunConfig) -> tuple[LabeledDataset, LabeledDataset, np.ndarray]:
    """Load the source, hold out a test split and draw the long-tailed training subset."""
    source = load_source(cfg.data["source"])
    if "test_source" in cfg.data:
        pool, test = source, load_source(cfg.data["test_source"])
    else:
        pool, test = split_per_class(source, int(cfg.data.get("test_per_class", 100)), int(cfg.data.get("split_seed", 0)))
    if "long_tail" in cfg.data:
        train, sizes = build_long_tailed(pool, cfg.long_tail_spec(pool.num_classes))
    else:
        train, sizes = pool, pool.class_counts()
    return train, test, np.asarray(sizes)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved(cfg: cfgmod.RunConfig, out_dir: str, overrides) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.yaml"), "w") as fh:
        fh.write(cfgmod.dump(cfg.raw))
    _write_json(os.path.join(out_dir, "overrides.json"), list(overrides or []))


def cmd_data(cfg: cfgmod.RunConfig, overrides) -> int:
    train, test, sizes = prepare_data(cfg)
    out = cfg.output_dir
    _write_resolved(cfg, out, overrides)
    part = partition_classes(train.num_classes)
    manifest = {
        "name": cfg.name,
        "num_classes": train.num_classes,
        "feature_shape": list(train.feature_shape),
        "class_sizes": [int(v) for v in sizes],
        "train_size": len(train),
        "test_size": len(test),
        "test_class_sizes": test.class_counts().tolist(),
        "ur": float(sizes[0] / sizes[-1]),
        "partition": {k: sorted(getattr(part, k)) for k in ("head", "body", "tail")},
        "overrides": list(overrides or []),
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(os.path.join(out, "manifest.json"))
    return 0


def cmd_train(cfg: cfgmod.RunConfig, overrides) -> int:
    train, test, sizes = prepare_data(cfg)
    out = cfg.output_dir
    _write_resolved(cfg, out, overrides)
    model = init_model(cfg.model_spec(train.feature_shape, train.num_classes))
    result = run_training(cfg.train, model, train, sizes, probe=test, out_dir=out)
    manifest = {
        "name": cfg.name,
        "class_sizes": [int(v) for v in sizes],
        "epochs": cfg.train.epochs,
        "best_epoch": result.best_epoch,
        "best_probe_robust": result.best_probe_robust,
        "train": cfg.train.to_dict(),
        "model": model.spec.to_dict(),
        "overrides": list(overrides or []),
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(out)
    return 0


def cmd_eval(cfg: cfgmod.RunConfig, overrides, checkpoint: str, features: bool = False) -> int:
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(checkpoint)
    model, header = load_checkpoint(checkpoint)
    _, test, sizes = prepare_data(cfg)
    if model.spec.num_classes != test.num_classes:
        raise ModelError(f"checkpoint has {model.spec.num_classes} classes, data has {test.num_classes}")
    out = cfg.output_dir
    _write_resolved(cfg, out, overrides)
    report = evaluate(model, test, cfg.eval_attacks, batch_size=cfg.eval_batch_size)
    c = test.num_classes
    histograms, bounds = {}, {}
    for name in cfg.eval_attacks:
        h = ae_prediction_histogram(report.attacks[name].adv_pred, c)
        histograms[name] = {"counts": h.counts.tolist(), "entropy": h.entropy, "normalized_entropy": h.normalized_entropy}
        bounds[name] = {mode: report.bound(name, mode).value for mode in ("normalized", "raw")}
    extra = {
        "checkpoint": os.path.abspath(checkpoint),
        "checkpoint_epoch": int(header.get("epoch", 0)),
        "train_class_sizes": [int(v) for v in sizes],
        "ae_histograms": histograms,
        "robust_risk_bounds": bounds,
        "bound_attack": cfg.bound_attack,
        "overrides": list(overrides or []),
    }
    write_report_json(report, os.path.join(out, "report.json"), extra)
    rows = class_metric_rows(int(header.get("epoch", 0)), "test", report, None, None, None, omega_weights(sizes), c)
    with open(os.path.join(out, "eval_class_metrics.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=class_metric_columns(cfg.eval_attacks))
        writer.writeheader()
        writer.writerows(rows)
    if features:
        export_features(model, test, os.path.join(out, "features.csv"))
    print(os.path.join(out, "report.json"))
    return 0


SUMMARY_COLUMNS = ["run", "epochs", "final_loss", "final_ae_entropy", "best_probe_robust", "best_epoch", "clean_balanced", "robust_balanced"]


def cmd_report(root: str) -> int:
    if not os.path.isdir(root):
        raise FileNotFoundError(root)
    rows = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "metrics.csv" not in files and "report.json" not in files:
            continue
        row = {k: "" for k in SUMMARY_COLUMNS}
        row["run"] = os.path.relpath(dirpath, root)
        if "metrics.csv" in files:
            with open(os.path.join(dirpath, "metrics.csv")) as fh:
                epochs = list(csv.DictReader(fh))
            if epochs:
                last = epochs[-1]
                row.update(epochs=last["epoch"], final_loss=last["loss"], final_ae_entropy=last["ae_entropy"])
                probes = [(float(e["probe_robust_acc"]), e["epoch"]) for e in epochs if e["probe_robust_acc"]]
                if probes:
                    best = max(probes, key=lambda t: t[0])  # first maximum wins
                    row.update(best_probe_robust=repr(best[0]), best_epoch=best[1])
        if "report.json" in files:
            with open(os.path.join(dirpath, "report.json")) as fh:
                rep = json.load(fh)
            row["clean_balanced"] = repr(rep["clean_acc_balanced"])
            row["robust_balanced"] = ";".join(f"{k}={v['robust_acc_balanced']!r}" for k, v in sorted(rep["attacks"].items()))
        rows.append(row)
    with open(os.path.join(root, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in SUMMARY_COLUMNS]
    print("  ".join(c.ljust(w) for c, w in zip(SUMMARY_COLUMNS, widths)))
    for r in rows:
        print("  ".join(str(r[c]).ljust(w) for c, w in zip(SUMMARY_COLUMNS, widths)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reat", description="Long-tailed adversarial training toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("data", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML file or preset:NAME")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--features", action="store_true", help="also export the feature CSV")
    p = sub.add_parser("report")
    p.add_argument("--dir", required=True)
    sub.add_parser("presets")
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"reat-error kind={kind} message={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "presets":
            print("\n".join(cfgmod.preset_names()))
            return 0
        if args.command == "report":
            return cmd_report(args.dir)
        cfg = cfgmod.load(args.config, args.override)
        if args.command == "data":
            return cmd_data(cfg, args.override)
        if args.command == "train":
            return cmd_train(cfg, args.override)
        return cmd_eval(cfg, args.override, args.checkpoint, args.features)
    except cfgmod.ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (FileNotFoundError, IsADirectoryError) as exc:
        return _fail("missing-file", exc, EXIT_MISSING)
    except (DatasetError, ModelError, CheckpointError) as exc:
        return _fail("input", exc, EXIT_CONFIG)
    except (TrainingError, AttackError, NonFiniteError) as exc:
        return _fail("aborted", exc, EXIT_ABORTED)


if __name__ == "__main__":
    sys.exit(main())
