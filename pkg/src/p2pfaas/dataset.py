"""Synthetic/CSV datasets, per-peer partitioning, and the UUID-keyed object store."""
from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Batch
from .errors import ConfigError, DecodeError, IngestionError, NotFoundError, StoreError

PREPROCESSING = ("none", "min-max", "standardize")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 2
    features: int = 2
    samples: int = 2000
    separation: float = 3.0
    seed: int = 0
    path: str | None = None
    label_column: str = "label"
    preprocessing: str = "standardize"
    validation_fraction: float = 0.1

    def __post_init__(self):
        bad = []
        if self.kind not in ("blobs", "csv"):
            bad.append("dataset.kind")
        if self.kind == "blobs":
            if self.classes < 2:
                bad.append("dataset.classes")
            if self.features < 1:
                bad.append("dataset.features")
            if self.samples < 2:
                bad.append("dataset.samples")
        if self.kind == "csv" and not self.path:
            bad.append("dataset.path")
        if self.preprocessing not in PREPROCESSING:
            bad.append("dataset.preprocessing")
        if not 0 < self.validation_fraction < 1:
            bad.append("dataset.validation_fraction")
        if bad:
            raise ConfigError(f"invalid dataset spec: {', '.join(bad)}", bad)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    @property
    def n_train(self) -> int:
        return self.y_train.size

    @property
    def feature_dim(self) -> int:
        return self.x_train.shape[1]

    def validation(self) -> list[Batch]:
        return [Batch(self.x_val, self.y_val, 0)]


def _blob_centers(k: int, d: int, sep: float, rng) -> np.ndarray:
    # +/- axis directions first: the two-class case gets centers 2*sep apart.
    centers = []
    for c in range(min(k, 2 * d)):
        v = np.zeros(d)
        v[c // 2] = 1.0 if c % 2 == 0 else -1.0
        centers.append(v)
    for _ in range(k - len(centers)):
        v = rng.normal(size=d)
        centers.append(v / np.linalg.norm(v))
    return sep * np.array(centers)


def read_csv(path, label_column: str):
    """Read a numeric CSV with a header row; returns features, raw labels."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file", row=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestionError(f"no label column {label_column!r} in header", row=1)
        li = header.index(label_column)
        xs, ys = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", row=rowno)
            try:
                vals = [float(c) for c in row]
            except ValueError as e:
                raise IngestionError(str(e), row=rowno) from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError("non-finite value", row=rowno)
            ys.append(vals.pop(li))
            xs.append(vals)
    if not xs:
        raise IngestionError("no data rows", row=2)
    y = np.asarray(ys)
    if not np.all(y == np.round(y)) or y.min() < 0:
        raise IngestionError("labels must be non-negative integers")
    return np.asarray(xs, dtype=np.float64), y.astype(np.int64)


def preprocess(x: np.ndarray, method: str) -> np.ndarray:
    if method == "none":
        return x.copy()
    if method == "min-max":
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return (x - lo) / span
    if method == "standardize":
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        return (x - mu) / np.where(sd > 0, sd, 1.0)
    raise ConfigError(f"unknown preprocessing {method!r}", ["dataset.preprocessing"])


def generate(spec: DatasetSpec) -> Dataset:
    """Build the dataset, preprocess it, and split off a validation tail."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "blobs":
        centers = _blob_centers(spec.classes, spec.features, spec.separation, rng)
        y = np.arange(spec.samples) % spec.classes
        x = centers[y] + rng.normal(size=(spec.samples, spec.features))
        k = spec.classes
    else:
        x, y = read_csv(spec.path, spec.label_column)
        k = max(int(y.max()) + 1, 2)
    x = preprocess(x, spec.preprocessing)
    order = rng.permutation(y.size)
    n_val = max(1, int(round(spec.validation_fraction * y.size)))
    if n_val >= y.size:
        raise ConfigError("dataset too small for a train/validation split", ["dataset.samples"])
    val, train = order[:n_val], order[n_val:]
    return Dataset(x[train], y[train], x[val], y[val], k)


@dataclass
class Partition:
    peer_rank: int
    batches: list[Batch]
    epoch_shuffle_seed: int
    indices: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return sum(len(b) for b in self.batches)


def _epoch_seed(seed: int, epoch: int, rank: int | None = None) -> int:
    parts = [seed, epoch] if rank is None else [seed, epoch, rank]
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def partition_indices(n: int, P: int, epoch: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle ``range(n)`` for this epoch and deal it round-robin to P peers."""
    if P < 1:
        raise ConfigError(f"peer count must be >= 1, got {P}", ["peers"])
    if P > n:
        raise ConfigError(f"{P} peers but only {n} training samples", ["peers"])
    perm = np.random.default_rng(_epoch_seed(seed, epoch)).permutation(n)
    return [perm[r::P] for r in range(P)]


def make_partition(x, y, idx, rank: int, B: int, epoch: int, seed: int = 0) -> Partition:
    if B < 1:
        raise ConfigError(f"batch size must be >= 1, got {B}", ["batch_size"])
    pseed = _epoch_seed(seed, epoch, rank)
    idx = idx[np.random.default_rng(pseed).permutation(idx.size)]
    batches = [
        Batch(x[idx[s : s + B]], y[idx[s : s + B]], i)
        for i, s in enumerate(range(0, idx.size, B))
    ]
    return Partition(rank, batches, pseed, idx)


def partition_and_batch(data: Dataset, P: int, B: int, epoch: int, seed: int = 0) -> list[Partition]:
    parts = partition_indices(data.n_train, P, epoch, seed)
    return [make_partition(data.x_train, data.y_train, idx, r, B, epoch, seed) for r, idx in enumerate(parts)]


def peer_partition(data: Dataset, rank: int, P: int, B: int, epoch: int, seed: int = 0) -> Partition:
    idx = partition_indices(data.n_train, P, epoch, seed)[rank]
    return make_partition(data.x_train, data.y_train, idx, rank, B, epoch, seed)


# Batch blob: u32 batch_id, u32 rows, u32 feature_dim, then rows*dim <f8, then rows <i4.
_BATCH_HEAD = struct.Struct("<III")


def encode_batch(batch: Batch) -> bytes:
    rows, dim = batch.features.shape
    return (
        _BATCH_HEAD.pack(batch.batch_id, rows, dim)
        + batch.features.astype("<f8").tobytes()
        + batch.labels.astype("<i4").tobytes()
    )


def decode_batch(blob: bytes) -> Batch:
    if len(blob) < _BATCH_HEAD.size:
        raise DecodeError(f"batch blob too short ({len(blob)} bytes)")
    batch_id, rows, dim = _BATCH_HEAD.unpack_from(blob)
    expected = _BATCH_HEAD.size + rows * dim * 8 + rows * 4
    if len(blob) != expected:
        raise DecodeError(f"batch blob is {len(blob)} bytes, header implies {expected}")
    off = _BATCH_HEAD.size
    x = np.frombuffer(blob, dtype="<f8", count=rows * dim, offset=off).reshape(rows, dim)
    y = np.frombuffer(blob, dtype="<i4", count=rows, offset=off + rows * dim * 8)
    return Batch(x, y, batch_id)


class ObjectStore:
    """Directory of immutable blobs named by UUID; safe for concurrent use."""

    def __init__(self, root=None):
        if root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="p2pfaas-store-")
            root = self._tmp.name
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        try:
            canonical = str(uuid.UUID(key))
        except (ValueError, TypeError, AttributeError):
            raise NotFoundError(f"not a UUID key: {key!r}") from None
        return self.root / canonical

    def put(self, data: bytes, key: str | None = None) -> str:
        key = str(uuid.uuid4()) if key is None else key
        path = self._path(key)
        with self._lock:
            if path.exists():
                if path.read_bytes() != data:
                    raise StoreError(f"key {key} already holds a different blob")
                return key
            try:
                fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except OSError as e:
                raise StoreError(f"write of {key} failed: {e}") from e
        return key

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"no blob under key {key}") from None
        except OSError as e:
            raise StoreError(f"read of {key} failed: {e}") from e

    def delete(self, key: str) -> None:
        try:
            self._path(key).unlink()
        except FileNotFoundError:
            pass

    def __contains__(self, key) -> bool:
        try:
            return self._path(key).exists()
        except NotFoundError:
            return False

    def keys(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if not p.name.startswith("."))

    def __len__(self):
        return len(self.keys())


def store_batches(store: ObjectStore, partition: Partition) -> list[tuple[int, str]]:
    return [(b.batch_id, store.put(encode_batch(b))) for b in partition.batches]


def load_batch(store: ObjectStore, key: str) -> Batch:
    return decode_batch(store.get(key))
