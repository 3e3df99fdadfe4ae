"""Dense backbone + linear head with softmax cross-entropy and analytic gradients.

Flattened parameter order is fixed: backbone layers first (each layer's
weight matrix row-major, then its bias), then the head matrix ``V``
row-major, then the head bias. Weight matrices are stored ``(out, in)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import LoadError, ParameterError, ShapeError
from .rng import stream

FT = "ft"
LP = "lp"
MODES = (FT, LP)
ACTIVATIONS = ("identity", "relu", "tanh")

CHECKPOINT_MAGIC = "fedncm-params/1"


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"layer weight {self.W.shape} and bias {self.b.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Backbone layers plus head. Treated as an immutable value."""

    layers: tuple[Layer, ...]
    head_V: np.ndarray
    head_b: np.ndarray
    input_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != dim:
                raise ShapeError(f"layer {i} expects input {layer.in_dim}, previous width is {dim}")
            dim = layer.out_dim
        if self.head_V.ndim != 2 or self.head_V.shape[1] != dim:
            raise ShapeError(f"head V {self.head_V.shape} does not match feature width {dim}")
        if self.head_b.shape != (self.head_V.shape[0],):
            raise ShapeError("head bias length must equal number of classes")

    @property
    def num_classes(self) -> int:
        return self.head_V.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.head_V.shape[1]

    def head_param_count(self) -> int:
        return self.head_V.size + self.head_b.size

    def backbone_param_count(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def param_count(self) -> int:
        return self.backbone_param_count() + self.head_param_count()

    def trainable_count(self, mode: str) -> int:
        return self.head_param_count() if mode == LP else self.param_count()

    def with_head(self, V: np.ndarray, b: np.ndarray) -> "ModelParams":
        return ModelParams(self.layers, np.array(V, dtype=np.float64), np.array(b, dtype=np.float64), self.input_dim)


@dataclass(frozen=True)
class GradientSet:
    """Gradients of the trainable subset. ``layers`` is empty in LP mode."""

    mode: str
    head_V: np.ndarray
    head_b: np.ndarray
    layers: tuple[tuple[np.ndarray, np.ndarray], ...] = field(default=())


@dataclass(frozen=True)
class BackboneSpec:
    """Hidden/output widths of the backbone MLP and how to initialise it.

    ``init`` is either ``"random"`` (seeded by ``init_seed``) or a path to a
    checkpoint written by :func:`save_params`.
    """

    widths: tuple[int, ...] = (1024, 64)
    activation: str = "relu"
    init: str = "random"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w < 1 for w in self.widths):
            raise ParameterError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def random_backbone(input_dim: int, widths: Sequence[int], activation: str, rng: np.random.Generator) -> tuple[Layer, ...]:
    """He-style normal init (``std = sqrt(2/fan_in)``), zero biases."""
    layers = []
    dim = input_dim
    for width in widths:
        W = rng.standard_normal((width, dim)) * math.sqrt(2.0 / dim)
        layers.append(Layer(W, np.zeros(width), activation))
        dim = width
    return tuple(layers)


def random_head(num_classes: int, feature_dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Weights uniform in +-1/sqrt(feature_dim), zero bias."""
    bound = 1.0 / math.sqrt(feature_dim)
    return rng.uniform(-bound, bound, size=(num_classes, feature_dim)), np.zeros(num_classes)


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim or x.ndim not in (1, 2):
        raise ShapeError(f"input of shape {x.shape} does not match input dim {params.input_dim}")
    h = x
    for layer in params.layers:
        h = _act(layer.activation, h @ layer.W.T + layer.b)
    return h, h @ params.head_V.T + params.head_b


def features(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return forward(params, X)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(params: ModelParams, X: np.ndarray, y: np.ndarray, mode: str = FT) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy over the batch and its exact gradient.

    In ``LP`` mode only the head gradient is produced.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    n = len(y)
    if n == 0 or X.shape[0] != n:
        raise ParameterError("batch must be non-empty with one label per row")
    if y.min() < 0 or y.max() >= params.num_classes:
        raise ParameterError("label out of range")
    if X.shape[1] != params.input_dim:
        raise ShapeError(f"batch width {X.shape[1]} does not match input dim {params.input_dim}")

    pre, post = [], [X]
    h = X
    for layer in params.layers:
        z = h @ layer.W.T + layer.b
        h = _act(layer.activation, z)
        pre.append(z)
        post.append(h)
    logits = h @ params.head_V.T + params.head_b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, y]))

    dlogits = np.exp(shifted - log_z[:, None])
    dlogits[rows, y] -= 1.0
    dlogits /= n
    dV = dlogits.T @ h
    db = dlogits.sum(axis=0)
    if mode == LP:
        return loss, GradientSet(LP, dV, db)

    layer_grads = []
    dh = dlogits @ params.head_V
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        dz = dh * _act_grad(layer.activation, pre[i], post[i + 1])
        layer_grads.append((dz.T @ post[i], dz.sum(axis=0)))
        dh = dz @ layer.W
    return loss, GradientSet(FT, dV, db, tuple(reversed(layer_grads)))


def apply_update(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    """One plain SGD step on the trainable subset; frozen arrays are shared as-is."""
    if grads.head_V.shape != params.head_V.shape or grads.head_b.shape != params.head_b.shape:
        raise ShapeError("head gradient shape mismatch")
    layers = params.layers
    if grads.mode == FT:
        if len(grads.layers) != len(layers):
            raise ShapeError("gradient has a different number of layers")
        new_layers = []
        for layer, (gW, gb) in zip(layers, grads.layers):
            if gW.shape != layer.W.shape or gb.shape != layer.b.shape:
                raise ShapeError("layer gradient shape mismatch")
            new_layers.append(Layer(layer.W - lr * gW, layer.b - lr * gb, layer.activation))
        layers = tuple(new_layers)
    elif grads.layers:
        raise ShapeError("LP gradients must not carry backbone entries")
    return ModelParams(layers, params.head_V - lr * grads.head_V, params.head_b - lr * grads.head_b, params.input_dim)


def flatten(params: ModelParams) -> np.ndarray:
    parts = []
    for layer in params.layers:
        parts += [layer.W.ravel(), layer.b]
    parts += [params.head_V.ravel(), params.head_b]
    return np.concatenate(parts)


def unflatten(vec: np.ndarray, like: ModelParams) -> ModelParams:
    """Inverse of :func:`flatten`, taking shapes and activations from ``like``."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (like.param_count(),):
        raise ShapeError(f"expected vector of length {like.param_count()}, got {vec.shape}")
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = vec[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    layers = []
    for layer in like.layers:
        W = take(layer.W.shape)
        layers.append(Layer(W, take(layer.b.shape), layer.activation))
    V = take(like.head_V.shape)
    return ModelParams(tuple(layers), V, take(like.head_b.shape), like.input_dim)


def trainable_vector(params: ModelParams, mode: str) -> np.ndarray:
    """Flattened trainable coordinates; in LP mode this is the tail (head) of :func:`flatten`."""
    flat = flatten(params)
    return flat[params.backbone_param_count():] if mode == LP else flat


def with_trainable_vector(params: ModelParams, vec: np.ndarray, mode: str) -> ModelParams:
    if mode == FT:
        return unflatten(vec, params)
    C, d = params.head_V.shape
    if np.shape(vec) != (params.head_param_count(),):
        raise ShapeError(f"expected head vector of length {params.head_param_count()}")
    return ModelParams(params.layers, vec[:C * d].reshape(C, d).copy(), vec[C * d:].copy(), params.input_dim)


def flatten_grads(grads: GradientSet) -> np.ndarray:
    parts = []
    for gW, gb in grads.layers:
        parts += [gW.ravel(), gb]
    parts += [grads.head_V.ravel(), grads.head_b]
    return np.concatenate(parts)


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(forward(params, X)[1], axis=-1)


def evaluate(params: ModelParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ParameterError("evaluation set is empty")
    return float(np.mean(predict(params, test.X) == test.y))


def backbone_bytes(params: ModelParams) -> bytes:
    return b"".join(layer.W.tobytes() + layer.b.tobytes() for layer in params.layers)


def save_params(params: ModelParams, path: str | Path) -> None:
    """Write a checkpoint: one JSON header line, then float64 little-endian values in flatten order."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "input_dim": params.input_dim,
        "layers": [[l.in_dim, l.out_dim, l.activation] for l in params.layers],
        "head": list(params.head_V.shape),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(flatten(params).astype("<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise LoadError("unreadable checkpoint header", line=1) from None
    if nl < 0 or header.get("format") != CHECKPOINT_MAGIC:
        raise LoadError(f"not a {CHECKPOINT_MAGIC} checkpoint", line=1)
    layers = []
    for in_dim, out_dim, act in header["layers"]:
        layers.append(Layer(np.zeros((out_dim, in_dim)), np.zeros(out_dim), act))
    C, d = header["head"]
    like = ModelParams(tuple(layers), np.zeros((C, d)), np.zeros(C), int(header["input_dim"]))
    body = raw[nl + 1:]
    if len(body) != 8 * like.param_count():
        raise LoadError(f"checkpoint body holds {len(body)} bytes, expected {8 * like.param_count()}")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(vec)):
        raise LoadError("checkpoint contains non-finite values")
    return unflatten(vec, like)


def build_backbone(spec: BackboneSpec, input_dim: int, rng: np.random.Generator | None = None) -> tuple[Layer, ...]:
    """Materialise the backbone described by ``spec``.

    ``rng`` overrides the seeded init (used for the from-scratch baseline).
    """
    if spec.init == "random" or rng is not None:
        rng = rng if rng is not None else stream(spec.init_seed, "backbone-init")
        return random_backbone(input_dim, spec.widths, spec.activation, rng)
    loaded = load_params(spec.init)
    if loaded.input_dim != input_dim:
        raise ShapeError(f"checkpoint input dim {loaded.input_dim} != data dim {input_dim}")
    return loaded.layers
