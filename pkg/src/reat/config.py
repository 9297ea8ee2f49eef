"""Run configuration: YAML documents, presets, dotted overrides, validation."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import yaml

from .attacks import AttackConfig
from .datasets import LongTailSpec
from .losses import LossParams
from .models import ModelSpec
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "REAT_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


DATA_KEYS = {"source", "long_tail", "test_per_class", "test_source", "split_seed"}
LONG_TAIL_KEYS = {"ur", "n_max", "profile", "seed", "counts"}
MODEL_KEYS = {"arch", "widths", "feature_dim", "head", "tau", "feature_activation", "init_seed"}
EVAL_KEYS = {"attacks", "batch_size", "bound_attack"}
TOP_KEYS = {"name", "data", "model", "train", "eval", "output_dir"}


@dataclass
class RunConfig:
    name: str
    data: dict
    model: dict
    train: TrainConfig
    eval_attacks: dict[str, AttackConfig]
    eval_batch_size: int
    bound_attack: str | None
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def long_tail_spec(self, num_classes: int) -> LongTailSpec:
        lt = dict(self.data.get("long_tail") or {})
        counts = lt.get("counts")
        if counts is not None:
            lt.setdefault("ur", counts[0] / counts[-1])
            lt.setdefault("n_max", counts[0])
        return LongTailSpec(num_classes=num_classes, **lt)

    def model_spec(self, input_shape, num_classes: int) -> ModelSpec:
        return ModelSpec(input_shape=tuple(input_shape), num_classes=num_classes, **self.model)


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(where, f"expected a mapping, got {type(section).__name__}")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}" if where else key, "unknown key")


def _build(cls, values: dict, where: str):
    """Instantiate a frozen dataclass, rejecting unknown keys and naming bad fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(values, names, where)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        bad = next((n for n in values if n in msg), None)
        raise ConfigError(f"{where}.{bad}" if bad else where, msg) from exc


def _validate_long_tail(lt: dict) -> None:
    _check_keys(lt, LONG_TAIL_KEYS, "data.long_tail")
    if "ur" in lt and (not isinstance(lt["ur"], (int, float)) or lt["ur"] < 1):
        raise ConfigError("data.long_tail.ur", f"must be a number >= 1, got {lt['ur']!r}")
    if "n_max" in lt and (not isinstance(lt["n_max"], int) or lt["n_max"] < 1):
        raise ConfigError("data.long_tail.n_max", f"must be a positive integer, got {lt['n_max']!r}")
    if lt.get("counts") is None and ("ur" not in lt or "n_max" not in lt):
        raise ConfigError("data.long_tail", "needs ur and n_max, or explicit counts")


def validate(raw: dict) -> RunConfig:
    """Check a parsed document and build the typed run configuration."""
    _check_keys(raw, TOP_KEYS, "")
    for required in ("data", "model", "train"):
        if required not in raw:
            raise ConfigError(required, "missing section")
    data = raw["data"]
    _check_keys(data, DATA_KEYS, "data")
    if "source" not in data or not isinstance(data["source"], dict) or "kind" not in data["source"]:
        raise ConfigError("data.source", "needs a mapping with a 'kind'")
    if data["source"]["kind"] not in ("synthetic", "idx", "cifar"):
        raise ConfigError("data.source.kind", f"unknown source kind {data['source']['kind']!r}")
    if data["source"]["kind"] == "synthetic" and data["source"].get("num_classes", 2) < 2:
        raise ConfigError("data.source.num_classes", "must be >= 2")
    if "long_tail" in data:
        _validate_long_tail(data["long_tail"])
    _check_keys(raw["model"], MODEL_KEYS, "model")

    train = dict(raw["train"])
    _check_keys(train, {f.name for f in dataclasses.fields(TrainConfig)}, "train")
    if "attack" in train:
        train["attack"] = _build(AttackConfig, train["attack"], "train.attack")
    if "loss_params" in train:
        train["loss_params"] = _build(LossParams, train["loss_params"], "train.loss_params")
    train_cfg = _build(TrainConfig, train, "train")

    ev = raw.get("eval") or {}
    _check_keys(ev, EVAL_KEYS, "eval")
    attacks = {}
    for name, spec in (ev.get("attacks") or {}).items():
        attacks[name] = _build(AttackConfig, spec, f"eval.attacks.{name}")
    bound_attack = ev.get("bound_attack")
    if bound_attack is not None and bound_attack not in attacks:
        raise ConfigError("eval.bound_attack", f"{bound_attack!r} is not a configured attack")
    out = raw.get("output_dir") or raw.get("name") or "run"
    cfg = RunConfig(
        name=raw.get("name", "run"),
        data=data,
        model=raw["model"],
        train=train_cfg,
        eval_attacks=attacks,
        eval_batch_size=int(ev.get("batch_size", 500)),
        bound_attack=bound_attack,
        output_dir=resolve_output_dir(out),
        raw=raw,
    )
    # surface model-level errors before any work starts
    try:
        cfg.model_spec((1,), 2) if cfg.model.get("arch", "mlp") == "mlp" else None
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from exc
    return cfg


def resolve_output_dir(path: str) -> str:
    if os.path.isabs(path):
        return path
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return os.path.join(root, path) if root else path


def parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries (values parsed as YAML scalars)."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"{part} is not a section")
        node[parts[-1]] = parse_value(value)
    return out


def preset_names() -> list[str]:
    files = resources.files("reat").joinpath("presets").iterdir()
    return sorted(p.name[: -len(".yaml")] for p in files if p.name.endswith(".yaml"))


def read_document(path: str) -> dict:
    if path.startswith("preset:"):
        name = path[len("preset:") :]
        res = resources.files("reat").joinpath("presets", f"{name}.yaml")
        if not res.is_file():
            raise ConfigError("config", f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        text = res.read_text()
    else:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path) as fh:
            text = fh.read()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"YAML parse error: {exc}".replace("\n", " ")) from exc
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    return doc


def load(path: str, overrides=()) -> RunConfig:
    return validate(apply_overrides(read_document(path), overrides))


def dump(raw: dict) -> str:
    return yaml.safe_dump(raw, sort_keys=True)
