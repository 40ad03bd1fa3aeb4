"""
One-hidden-layer classifier in numpy: training, evaluation, parameter serialization and FedAvg.

Parameters travel as one flat float64 vector laid out as W1 (input x hidden, row-major), b1,
W2 (hidden x output, row-major), b2. The hidden activation is tanh and the loss is softmax
cross-entropy.
"""
import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple, Union

import numpy as np

from utils import seeded_rng

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"FLMP"
PARAMS_VERSION = 1
_HEADER = struct.Struct("<4sB4I")


class ModelError(Exception):
    """Base class for model and aggregation errors."""


class BadShapes(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class NonFiniteLoss(ModelError):
    pass


class EmptyUpdateSet(ModelError):
    pass


class AllZeroWeights(ModelError):
    pass


class MalformedBytes(ModelError):
    pass


class Shapes(NamedTuple):
    input_dim: int
    hidden_dim: int
    output_dim: int

    @property
    def param_count(self) -> int:
        return (self.input_dim * self.hidden_dim + self.hidden_dim
                + self.hidden_dim * self.output_dim + self.output_dim)


@dataclass(eq=False)
class ModelParams:
    shapes: Shapes
    weights: np.ndarray

    def __post_init__(self):
        self.shapes = Shapes(*self.shapes)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.size != self.shapes.param_count:
            raise ShapeMismatch(f"{self.weights.size} weights for shapes {tuple(self.shapes)}")

    def layers(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Views (W1, b1, W2, b2) into the flat vector."""
        d, h, k = self.shapes
        w = self.weights
        i = d * h
        W1 = w[:i].reshape(d, h)
        b1 = w[i:i + h]
        i += h
        W2 = w[i:i + h * k].reshape(h, k)
        b2 = w[i + h * k:]
        return W1, b1, W2, b2

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all())

    def copy(self) -> "ModelParams":
        return ModelParams(self.shapes, self.weights.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.weights, other.weights)


@dataclass
class DataShard:
    features: np.ndarray
    labels: np.ndarray
    owner: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeMismatch("features must be 2-d and labels 1-d")
        if len(self.features) != len(self.labels):
            raise ShapeMismatch(f"{len(self.features)} feature rows for {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise ShapeMismatch(f"shard {self.owner!r} is empty")

    @property
    def n_samples(self) -> int:
        return int(len(self.labels))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 20
    seed: Union[int, Tuple[int, ...]] = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class LocalUpdate(NamedTuple):
    params: ModelParams
    n_samples: int
    train_loss: float


def init_model(seed: Union[int, Sequence[int]], shapes: Sequence[int]) -> ModelParams:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    if len(shapes) != 3 or any(int(s) < 1 for s in shapes):
        raise BadShapes(f"shapes must be three dims >= 1, got {tuple(shapes)}")
    shapes = Shapes(*(int(s) for s in shapes))
    d, h, k = shapes
    rng = seeded_rng(*np.atleast_1d(seed))
    W1 = rng.standard_normal((d, h)) / np.sqrt(d)
    W2 = rng.standard_normal((h, k)) / np.sqrt(h)
    weights = np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(k)])
    return ModelParams(shapes, weights)


def random_params(shapes: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> ModelParams:
    """Every weight drawn from N(0, scale^2); what a random-weights attacker submits."""
    shapes = Shapes(*shapes)
    return ModelParams(shapes, rng.normal(0.0, scale, size=shapes.param_count))


def _check_dims(params: ModelParams, shard: DataShard) -> None:
    if shard.features.shape[1] != params.shapes.input_dim:
        raise ShapeMismatch(f"shard has {shard.features.shape[1]} features, model expects {params.shapes.input_dim}")
    if shard.labels.min() < 0 or shard.labels.max() >= params.shapes.output_dim:
        raise ShapeMismatch(f"labels outside [0, {params.shapes.output_dim})")


def forward(params: ModelParams, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hidden activations and class probabilities."""
    W1, b1, W2, b2 = params.layers()
    H = np.tanh(X @ W1 + b1)
    logits = H @ W2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return H, expl / expl.sum(axis=1, keepdims=True)


def loss_and_gradient(params: ModelParams, X: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient as a flat vector in the parameter layout."""
    W1, b1, W2, b2 = params.layers()
    n = len(y)
    H = np.tanh(X @ W1 + b1)
    logits = H @ W2 + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    probs = np.exp(shifted - log_norm[:, None])
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dW2 = H.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dZ1 = (dlogits @ W2.T) * (1.0 - H ** 2)
    dW1 = X.T @ dZ1
    db1 = dZ1.sum(axis=0)
    grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    return loss, grad


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    _, probs = forward(params, np.asarray(X, dtype=np.float64))
    return probs.argmax(axis=1)


def local_train(params: ModelParams, shard: DataShard, cfg: TrainConfig) -> LocalUpdate:
    """
    Mini-batch SGD over a shard, reshuffled every epoch. Returns the new params, the sample count
    and the mean loss over the final epoch.
    """
    _check_dims(params, shard)
    rng = seeded_rng(*np.atleast_1d(cfg.seed))
    current = params.copy()
    X, y = shard.features, shard.labels
    n = shard.n_samples
    epoch_loss = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grad = loss_and_gradient(current, X[batch], y[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged in epoch {epoch + 1} for shard {shard.owner!r}")
            total += loss * len(batch)
            current.weights -= cfg.learning_rate * grad
        epoch_loss = total / n
    return LocalUpdate(current, n, float(epoch_loss))


def evaluate(params: ModelParams, validation: DataShard) -> float:
    """Fraction of argmax-correct predictions."""
    if validation.features.shape[1] != params.shapes.input_dim:
        raise ShapeMismatch(f"validation has {validation.features.shape[1]} features, "
                            f"model expects {params.shapes.input_dim}")
    if not params.is_finite():
        return 0.0
    return float(np.mean(predict(params, validation.features) == validation.labels))


def fedavg(updates: Sequence[Tuple[ModelParams, float]]) -> ModelParams:
    """Coordinate-wise weighted mean, weights normalized to sum 1."""
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    shapes = updates[0][0].shapes
    for params, _ in updates:
        if params.shapes != shapes:
            raise ShapeMismatch(f"cannot average {tuple(params.shapes)} with {tuple(shapes)}")
    w = np.array([float(weight) for _, weight in updates], dtype=np.float64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("aggregation weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("every aggregation weight is zero")
    w = w / total
    stack = np.stack([params.weights for params, _ in updates])
    return ModelParams(shapes, w @ stack)


def serialize_params(params: ModelParams) -> bytes:
    """
    Canonical wire form:

        "FLMP" | version u8 | input u32 | hidden u32 | output u32 | count u32 | count x float64

    all little-endian.
    """
    d, h, k = params.shapes
    header = _HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, d, h, k, params.weights.size)
    return header + params.weights.astype("<f8").tobytes()


def deserialize_params(blob: bytes) -> ModelParams:
    if len(blob) < _HEADER.size:
        raise MalformedBytes(f"{len(blob)} bytes is shorter than the params header")
    magic, version, d, h, k, count = _HEADER.unpack_from(blob)
    if magic != PARAMS_MAGIC:
        raise MalformedBytes(f"bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise MalformedBytes(f"unsupported params version {version}")
    if min(d, h, k) < 1:
        raise MalformedBytes(f"bad shapes ({d}, {h}, {k})")
    shapes = Shapes(d, h, k)
    if count != shapes.param_count:
        raise MalformedBytes(f"count {count} does not match shapes {tuple(shapes)}")
    expected = _HEADER.size + 8 * count
    if len(blob) != expected:
        raise MalformedBytes(f"expected {expected} bytes, got {len(blob)}")
    weights = np.frombuffer(blob, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    return ModelParams(shapes, weights)
