"""Numeric kernel: dense softmax classifiers, cross-entropy gradients, SGD step.

Parameters of every model live in one flat float64 vector.  Layers are stored
in order, each as a row-major ``(fan_in, fan_out)`` weight block followed by a
``fan_out`` bias block.  Logistic regression is the single-layer case; the MLP
uses tanh between layers and softmax at the output.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DecodeError,
    NumericError,
    PreconditionError,
    ShapeError,
    StalenessError,
)

LOGREG = "logistic-regression"
MLP = "mlp"


@dataclass(frozen=True)
class Arch:
    kind: str
    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.kind not in (LOGREG, MLP):
            raise ConfigError(f"unknown architecture kind {self.kind!r}", ["model"])
        if len(self.sizes) < 2 or (self.kind == LOGREG and len(self.sizes) != 2):
            raise ConfigError(f"bad layer sizes {self.sizes} for {self.kind}", ["model"])
        if any(s <= 0 for s in self.sizes):
            raise ConfigError(f"non-positive dimension in {self.sizes}", ["model"])
        if self.sizes[-1] < 2:
            raise ConfigError("need at least 2 classes", ["model"])
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}", ["model"])

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def num_classes(self) -> int:
        return self.sizes[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def describe(self) -> str:
        if self.kind == LOGREG:
            return f"logreg:{self.sizes[0]},{self.sizes[1]}"
        return "mlp:" + ",".join(map(str, self.sizes))

    @classmethod
    def parse(cls, text: str) -> "Arch":
        """Parse ``logreg:D,K`` or ``mlp:D,H1,...,K``."""
        try:
            kind, _, dims = text.strip().partition(":")
            sizes = tuple(int(x) for x in dims.split(","))
        except ValueError:
            raise ConfigError(f"cannot parse model {text!r}", ["model"]) from None
        kind = {"logreg": LOGREG, LOGREG: LOGREG, "mlp": MLP}.get(kind, kind)
        return cls(kind, sizes)


def logistic_regression(d: int, k: int) -> Arch:
    return Arch(LOGREG, (d, k))


def mlp(sizes, activation="tanh") -> Arch:
    return Arch(MLP, tuple(sizes), activation)


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray
    arch: Arch
    version: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size != self.arch.param_count:
            raise ShapeError(
                f"{values.size} values for {self.arch.describe()} "
                f"(expected {self.arch.param_count})"
            )

    def layers(self):
        """Yield ``(W, b)`` views for each layer."""
        off = 0
        for n_in, n_out in self.arch.layer_shapes:
            w = self.values[off : off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            b = self.values[off : off + n_out]
            off += n_out
            yield w, b

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def to_bytes(self) -> bytes:
        head = json.dumps(
            {"kind": self.arch.kind, "sizes": list(self.arch.sizes), "version": self.version}
        ).encode()
        return struct.pack("<I", len(head)) + head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        try:
            (n,) = struct.unpack_from("<I", blob)
            head = json.loads(blob[4 : 4 + n])
            arch = Arch(head["kind"], tuple(head["sizes"]))
            body = blob[4 + n :]
            if len(body) != 8 * arch.param_count:
                raise DecodeError(f"model body is {len(body)} bytes")
            values = np.frombuffer(body, dtype="<f8").astype(np.float64)
            return cls(values, arch, head["version"])
        except (struct.error, ValueError, KeyError, TypeError) as e:
            if isinstance(e, DecodeError):
                raise
            raise DecodeError(f"corrupt model blob: {e}") from e


@dataclass(frozen=True, eq=False)
class GradientVector:
    values: np.ndarray
    source_version: int = 0
    batch_count: int = 1

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.batch_count < 1:
            raise PreconditionError("batch_count must be >= 1")

    def __len__(self):
        return self.values.size

    _HEAD = struct.Struct("<IIQ")

    def to_bytes(self) -> bytes:
        head = self._HEAD.pack(self.source_version, self.batch_count, self.values.size)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GradientVector":
        try:
            version, count, n = cls._HEAD.unpack_from(blob)
        except struct.error as e:
            raise DecodeError(f"corrupt gradient blob: {e}") from e
        body = blob[cls._HEAD.size :]
        if len(body) != 8 * n:
            raise DecodeError(f"gradient body is {len(body)} bytes, expected {8 * n}")
        return cls(np.frombuffer(body, dtype="<f8"), version, count)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    batch_id: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"features {x.shape} do not match labels {y.shape}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    def __eq__(self, other):
        if not isinstance(other, Batch):
            return NotImplemented
        return (
            self.batch_id == other.batch_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class LossValue:
    value: float
    sample_count: int


@dataclass(frozen=True)
class Evaluation:
    loss: LossValue
    accuracy: float

    def __iter__(self):
        return iter((self.loss, self.accuracy))


def init_model(arch: Arch, seed: int) -> ModelParams:
    if not isinstance(arch, Arch):
        raise ConfigError(f"not an architecture: {arch!r}")
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in arch.layer_shapes:
        r = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-r, r, size=n_in * n_out))
        chunks.append(rng.uniform(-r, r, size=n_out))
    return ModelParams(np.concatenate(chunks), arch, 0)


def _check_batch(model: ModelParams, batch: Batch):
    if batch.features.shape[1] != model.arch.input_dim:
        raise ShapeError(
            f"batch has {batch.features.shape[1]} features, model expects {model.arch.input_dim}"
        )
    if len(batch) == 0:
        raise PreconditionError("empty batch")
    k = model.arch.num_classes
    if batch.labels.min() < 0 or batch.labels.max() >= k:
        raise ShapeError(f"labels outside [0, {k})")


def _forward(model: ModelParams, x: np.ndarray):
    """Return per-layer activations and the output log-probabilities."""
    acts = [x]
    layers = list(model.layers())
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if i < len(layers) - 1:
            acts.append(np.tanh(z))
        else:
            zmax = z.max(axis=1, keepdims=True)
            logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    return acts, layers, logp


def loss_and_gradient(model: ModelParams, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``model.values``."""
    _check_batch(model, batch)
    x, y = batch.features, batch.labels
    n = y.size
    acts, layers, logp = _forward(model, x)
    loss = -logp[np.arange(n), y].mean()

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_prev = acts[i]
        grads.append(dz.sum(axis=0))
        grads.append((a_prev.T @ dz).ravel())
        if i > 0:
            dz = (dz @ w.T) * (1.0 - a_prev * a_prev)
    return float(loss), np.concatenate(grads[::-1])


def loss(model: ModelParams, batch: Batch) -> float:
    _check_batch(model, batch)
    _, _, logp = _forward(model, batch.features)
    return float(-logp[np.arange(len(batch)), batch.labels].mean())


def compute_batch_gradient(model: ModelParams, batch: Batch) -> GradientVector:
    if not np.all(np.isfinite(model.values)):
        raise NumericError("model has non-finite values")
    _, g = loss_and_gradient(model, batch)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient on batch {batch.batch_id}")
    return GradientVector(g, model.version, 1)


def average_batch_gradients(grads) -> GradientVector:
    grads = list(grads)
    if not grads:
        raise PreconditionError("cannot average an empty gradient list")
    versions = {g.source_version for g in grads}
    if len(versions) > 1:
        raise StalenessError(f"mixed source versions {sorted(versions)}")
    lengths = {len(g) for g in grads}
    if len(lengths) > 1:
        raise ShapeError(f"mixed gradient lengths {sorted(lengths)}")
    mean = np.mean(np.stack([g.values for g in grads]), axis=0)
    return GradientVector(mean, grads[0].source_version, sum(g.batch_count for g in grads))


def apply_update(model: ModelParams, grad: GradientVector, lr: float) -> ModelParams:
    """One descent step: ``values - lr * grad``."""
    if not lr > 0:
        raise PreconditionError(f"learning rate must be positive, got {lr}")
    if len(grad) != model.values.size:
        raise ShapeError(f"gradient length {len(grad)} != parameter count {model.values.size}")
    if grad.source_version != model.version:
        raise StalenessError(
            f"gradient computed at version {grad.source_version}, model is at {model.version}"
        )
    values = model.values - lr * grad.values
    if not np.all(np.isfinite(values)):
        raise NumericError("update produced non-finite parameters")
    return ModelParams(values, model.arch, model.version + 1)


def evaluate(model: ModelParams, dataset) -> Evaluation:
    """Mean cross-entropy and top-1 accuracy over every sample in ``dataset``."""
    batches = [dataset] if isinstance(dataset, Batch) else list(dataset)
    if not batches or sum(len(b) for b in batches) == 0:
        raise PreconditionError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    n = 0
    for b in batches:
        _check_batch(model, b)
        _, _, logp = _forward(model, b.features)
        total_loss += -logp[np.arange(len(b)), b.labels].sum()
        correct += int((logp.argmax(axis=1) == b.labels).sum())
        n += len(b)
    return Evaluation(LossValue(float(total_loss / n), n), correct / n)
