"""Desk-scale classifiers: an MLP and a small CNN trunk, linear or cosine head."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from urllib.parse import quote, unquote

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "reat-checkpoint"
FEATURE_ACTIVATIONS = {"none": lambda t: t, "relu": nd.relu, "tanh": nd.tanh}


class ModelError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    num_classes: int
    arch: str = "mlp"
    widths: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    head: str = "linear"
    tau: float = 16.0
    feature_activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.arch not in ("mlp", "cnn"):
            raise ModelError(f"unknown arch {self.arch!r}")
        if self.feature_activation not in FEATURE_ACTIVATIONS:
            raise ModelError(f"feature_activation must be one of {tuple(FEATURE_ACTIVATIONS)}")
        if self.head not in ("linear", "cosine"):
            raise ModelError(f"unknown head {self.head!r}")
        if self.feature_dim < 2:
            raise ModelError("feature_dim must be >= 2")
        if self.num_classes < 2:
            raise ModelError("need at least 2 classes")
        if any(w < 1 for w in self.widths):
            raise ModelError(f"invalid widths {self.widths}")
        if self.head == "cosine" and self.tau <= 0:
            raise ModelError("cosine head needs tau > 0")
        if self.arch == "cnn" and len(self.input_shape) != 3:
            raise ModelError("cnn expects input_shape (channels, height, width)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d


@dataclass
class ForwardOutput:
    features: Tensor
    logits: Tensor
    prob_features: Tensor
    log_prob_features: Tensor


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def forward(self, x, params: dict[str, Tensor] | None = None) -> ForwardOutput:
        return forward(self, x, params)

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = []
        for start in range(0, len(x), batch_size):
            out.append(forward(self, x[start : start + batch_size]).logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(spec: ModelSpec) -> Model:
    """Seeded He-uniform weights, zero biases.  Parameter order is fixed."""
    rng = np.random.default_rng(spec.init_seed)
    params: dict[str, np.ndarray] = {}
    if spec.arch == "mlp":
        fan = int(np.prod(spec.input_shape))
        for i, width in enumerate(spec.widths):
            params[f"hidden{i}.w"] = _he_uniform(rng, (fan, width), fan)
            params[f"hidden{i}.b"] = np.zeros(width)
            fan = width
    else:
        ch, h, w = spec.input_shape
        for i, width in enumerate(spec.widths):
            params[f"conv{i}.w"] = _he_uniform(rng, (width, ch, 3, 3), ch * 9)
            params[f"conv{i}.b"] = np.zeros(width)
            ch, h, w = width, h // 2, w // 2
            if h < 1 or w < 1:
                raise ModelError(f"input {spec.input_shape} too small for {len(spec.widths)} conv stages")
        fan = ch * h * w
    params["feature.w"] = _he_uniform(rng, (fan, spec.feature_dim), fan)
    params["feature.b"] = np.zeros(spec.feature_dim)
    if spec.head == "linear":
        params["head.w"] = _he_uniform(rng, (spec.feature_dim, spec.num_classes), spec.feature_dim)
        params["head.b"] = np.zeros(spec.num_classes)
    else:
        params["head.directions"] = _he_uniform(rng, (spec.num_classes, spec.feature_dim), spec.feature_dim)
    return Model(spec, params)


def _unit_rows(t: Tensor) -> Tensor:
    norms = nd.sqrt((t * t).sum(axis=1, keepdims=True))
    return t / norms


def cosine_logits(features, directions, tau: float) -> Tensor:
    """``tau * cos(angle(f, W_c))`` for every row of ``features`` and class ``c``."""
    features = features if isinstance(features, Tensor) else nd.constant(features)
    directions = directions if isinstance(directions, Tensor) else nd.constant(directions)
    if np.any(np.all(features.data == 0.0, axis=1)):
        raise ModelError("cosine head received a zero feature vector")
    if np.any(np.all(directions.data == 0.0, axis=1)):
        raise ModelError("cosine head has a zero direction row")
    return (_unit_rows(features) @ _unit_rows(directions).T) * tau


def forward(model: Model, x, params: dict[str, Tensor] | None = None) -> ForwardOutput:
    """Features, logits and softmax-normalised features for a batch.

    ``params`` overrides the stored arrays with (possibly differentiable)
    tensors; by default parameters enter as constants.
    """
    spec = model.spec
    p = params if params is not None else {k: nd.constant(v) for k, v in model.params.items()}
    h = x if isinstance(x, Tensor) else nd.constant(x)
    if tuple(h.shape[1:]) != spec.input_shape:
        raise ModelError(f"expected input shape (B, {spec.input_shape}), got {h.shape}")
    if spec.arch == "mlp":
        h = h.reshape(h.shape[0], -1)
        for i in range(len(spec.widths)):
            h = nd.relu(h @ p[f"hidden{i}.w"] + p[f"hidden{i}.b"])
    else:
        for i in range(len(spec.widths)):
            h = nd.avg_pool2(nd.relu(nd.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], padding=1)))
        h = h.reshape(h.shape[0], -1)
    features = FEATURE_ACTIVATIONS[spec.feature_activation](h @ p["feature.w"] + p["feature.b"])
    if spec.head == "linear":
        logits = features @ p["head.w"] + p["head.b"]
    else:
        logits = cosine_logits(features, p["head.directions"], spec.tau)
    log_pf = nd.log_softmax(features, axis=1)
    return ForwardOutput(features, logits, nd.exp(log_pf), log_pf)


def differentiable_params(model: Model) -> dict[str, Tensor]:
    return {k: nd.tensor(v) for k, v in model.params.items()}


# -- checkpoints ---------------------------------------------------------------


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: Model, path, epoch: int = 0, rng_digest: str = "", extra: dict | None = None) -> None:
    """One ``key=value`` header line, then float32 little-endian blobs."""
    layout = ";".join(f"{k}:{'x'.join(str(d) for d in v.shape) or '1'}" for k, v in model.params.items())
    fields = {
        "version": str(CHECKPOINT_VERSION),
        "epoch": str(epoch),
        "rng": rng_digest,
        "spec": json.dumps(model.spec.to_dict(), sort_keys=True, separators=(",", ":")),
        "params": layout,
    }
    for k, v in (extra or {}).items():
        fields[k] = str(v)
    header = CHECKPOINT_MAGIC + " " + " ".join(f"{k}={quote(v, safe='')}" for k, v in fields.items()) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict[str, str]:
    with open(path, "rb") as fh:
        line = fh.readline()
    return _parse_header(line, path)


def _parse_header(line: bytes, path) -> dict[str, str]:
    if not line.endswith(b"\n"):
        raise CheckpointError(f"{path}: missing header line")
    parts = line.decode("ascii").split()
    if not parts or parts[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    fields = {}
    for item in parts[1:]:
        key, _, value = item.partition("=")
        fields[key] = unquote(value)
    return fields


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    header = _parse_header(line, path)
    if header.get("version") != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: version {header.get('version')} != {CHECKPOINT_VERSION}")
    spec = ModelSpec(**json.loads(header["spec"]))
    shapes = []
    for entry in header["params"].split(";"):
        name, _, dims = entry.partition(":")
        shapes.append((name, tuple(int(d) for d in dims.split("x"))))
    expected = 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(blob) != expected:
        raise CheckpointError(f"{path}: expected {expected} blob bytes, found {len(blob)}")
    params = {}
    offset = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).astype(np.float64)
        params[name] = arr.reshape(shape)
        offset += 4 * n
    return Model(spec, params), header


def quantize(model: Model) -> Model:
    """The model as it would be after a save/load cycle."""
    return Model(model.spec, {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()})
