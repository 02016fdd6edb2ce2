"""Datasets, small classifiers, mini-batch SGD and the accuracy utility.

Two architectures are supported, both stored as one flat float64 vector:

* ``linear``: softmax regression, layout ``[W (d*C), b (C)]``
* ``mlp``: one tanh hidden layer, layout ``[W1 (d*h), b1 (h), W2 (h*C), b2 (C)]``

All weight matrices are row-major with inputs along the first axis.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError

ARCHITECTURES = ("linear", "mlp")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled samples. ``labels`` are integer class ids in ``[0, num_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.ndim != 2:
            if x.size == 0:
                x = x.reshape(0, 0)
            else:
                raise DimensionError(f"features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise DimensionError(
                f"{x.shape[0]} feature rows but labels have shape {y.shape}"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return self.size

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def to_bytes(self) -> bytes:
        record = {
            "num_classes": self.num_classes,
            "shape": list(self.features.shape),
            "features": base64.b64encode(self.features.astype("<f8").tobytes()).decode(),
            "labels": base64.b64encode(self.labels.astype("<i8").tobytes()).decode(),
        }
        return json.dumps(record, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Dataset":
        record = json.loads(raw)
        x = np.frombuffer(base64.b64decode(record["features"]), dtype="<f8")
        y = np.frombuffer(base64.b64decode(record["labels"]), dtype="<i8")
        return cls(x.reshape(record["shape"]), y, record["num_classes"])


def concat(datasets) -> Dataset:
    datasets = list(datasets)
    if not datasets:
        raise EmptyInputError("nothing to concatenate")
    return Dataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        datasets[0].num_classes,
    )


def _param_count(arch: str, dims: tuple[int, ...]) -> int:
    if arch == "linear":
        d, c = dims
        return d * c + c
    d, h, c = dims
    return d * h + h + h * c + c


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus the shape descriptor needed to interpret it.

    ``dims`` is ``(n_features, n_classes)`` for ``linear`` and
    ``(n_features, hidden, n_classes)`` for ``mlp``.
    """

    weights: np.ndarray
    dims: tuple[int, ...]
    arch: str = "linear"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        dims = tuple(int(v) for v in self.dims)
        if len(dims) != (2 if self.arch == "linear" else 3) or min(dims) < 1:
            raise DimensionError(f"bad shape descriptor {dims} for {self.arch}")
        w = np.array(self.weights, dtype=np.float64, copy=True).ravel()
        if w.shape[0] != _param_count(self.arch, dims):
            raise DimensionError(
                f"{self.arch}{dims} needs {_param_count(self.arch, dims)} weights, got {w.shape[0]}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n_features(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def __len__(self) -> int:
        return int(self.weights.shape[0])

    def with_weights(self, weights: np.ndarray) -> "ModelParams":
        return ModelParams(weights, self.dims, self.arch)

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.arch == other.arch
            and self.dims == other.dims
            and np.array_equal(self.weights, other.weights)
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.arch}:{','.join(map(str, self.dims))}:".encode())
        h.update(self.weights.astype("<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        record = {
            "arch": self.arch,
            "dims": list(self.dims),
            "weights": base64.b64encode(self.weights.astype("<f8").tobytes()).decode(),
        }
        return json.dumps(record, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelParams":
        record = json.loads(raw)
        w = np.frombuffer(base64.b64decode(record["weights"]), dtype="<f8")
        return cls(w, tuple(record["dims"]), record["arch"])


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    batch_size: int = 16
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


def init_params(
    n_features: int,
    n_classes: int,
    arch: str = "linear",
    hidden: int = 16,
    seed: int = 0,
    scale: float = 0.01,
) -> ModelParams:
    """Small Gaussian initialisation, deterministic per ``seed``."""
    dims = (n_features, n_classes) if arch == "linear" else (n_features, hidden, n_classes)
    rng = np.random.default_rng(seed)
    w = scale * rng.standard_normal(_param_count(arch, dims))
    return ModelParams(w, dims, arch)


def _unpack(params: ModelParams):
    w = params.weights
    if params.arch == "linear":
        d, c = params.dims
        return w[: d * c].reshape(d, c), w[d * c :]
    d, h, c = params.dims
    i = 0
    w1 = w[i : i + d * h].reshape(d, h)
    i += d * h
    b1 = w[i : i + h]
    i += h
    w2 = w[i : i + h * c].reshape(h, c)
    i += h * c
    return w1, b1, w2, w[i:]


def _check(params: ModelParams, batch: Dataset) -> None:
    if batch.size == 0:
        raise EmptyInputError("batch is empty")
    if batch.num_features != params.n_features:
        raise DimensionError(
            f"model expects {params.n_features} features, batch has {batch.num_features}"
        )
    if batch.num_classes != params.n_classes:
        raise DimensionError(
            f"model has {params.n_classes} classes, batch declares {batch.num_classes}"
        )


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if params.arch == "linear":
        w, b = _unpack(params)
        return x @ w + b
    w1, b1, w2, b2 = _unpack(params)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(params: ModelParams, batch: Dataset) -> float:
    """Mean cross-entropy of ``params`` over ``batch``."""
    _check(params, batch)
    logp = _log_softmax(logits(params, batch.features))
    return float(-logp[np.arange(batch.size), batch.labels].mean())


def gradient(params: ModelParams, batch: Dataset) -> np.ndarray:
    """Analytic gradient of :func:`loss` with respect to the flat weights."""
    _check(params, batch)
    x, n = batch.features, batch.size
    if params.arch == "linear":
        w, b = _unpack(params)
        z = x @ w + b
    else:
        w1, b1, w2, b2 = _unpack(params)
        hidden = np.tanh(x @ w1 + b1)
        z = hidden @ w2 + b2
    g = np.exp(_log_softmax(z))
    g[np.arange(n), batch.labels] -= 1.0
    g /= n
    if params.arch == "linear":
        return np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])
    dz = (g @ w2.T) * (1.0 - hidden**2)
    return np.concatenate(
        [(x.T @ dz).ravel(), dz.sum(axis=0), (hidden.T @ g).ravel(), g.sum(axis=0)]
    )


def minibatches(n: int, batch_size: int, epochs: int, seed: int):
    """Yield index arrays for ``epochs`` shuffled passes over ``range(n)``.

    The final batch of an epoch may be short.
    """
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def local_train(init: ModelParams, data: Dataset, h: Hyperparams) -> ModelParams:
    """Run ``h.local_epochs`` epochs of mini-batch SGD from ``init`` on ``data``."""
    if data.size == 0:
        raise EmptyInputError("local dataset is empty")
    _check(init, data)
    w = init.weights.copy()
    current = init
    for idx in minibatches(data.size, h.batch_size, h.local_epochs, h.seed):
        w = w - h.learning_rate * gradient(current, data.subset(idx))
        current = init.with_weights(w)
    return current


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(logits(params, np.asarray(x, dtype=np.float64)), axis=1)


def utility(params: ModelParams, test: Dataset) -> float:
    """Test accuracy in ``[0, 1]``."""
    _check(params, test)
    return float(np.mean(predict(params, test.features) == test.labels))
