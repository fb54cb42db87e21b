"""Datasets, label-skew partitioning and mini-batching."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (BadMagicError, ConfigError, LengthMismatchError,
                     TruncatedFileError)
from .numerics import Batch

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.shape[0] != len(self.labels):
            raise LengthMismatchError(
                f"{self.features.shape[0]} feature rows vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])


def gen_blobs(n_classes: int, per_class_n: int, d_in: int, spread: float,
              seed: int | np.random.Generator) -> LabeledDataset:
    """Isotropic Gaussian clusters around standard-normal class means."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes", "S")
    if per_class_n < 10:
        raise ConfigError("need at least 10 samples per class", "dataset.per_class_n")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, d_in))
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class_n)
    noise = rng.standard_normal((len(labels), d_in))
    return LabeledDataset(means[labels] + spread * noise, labels, n_classes)


# -- IDX ---------------------------------------------------------------------

def _read_idx(path: str | Path, magic: int, n_dims: int) -> tuple[list[int], bytes]:
    raw = Path(path).read_bytes()
    header_len = 4 + 4 * n_dims
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the magic number")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the IDX header")
    dims = list(struct.unpack(f">{n_dims}I", raw[4:header_len]))
    body = raw[header_len:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: {len(body)} payload bytes, header promises {expected}")
    return dims, body[:expected]


def read_idx_images(path: str | Path) -> np.ndarray:
    (n, rows, cols), body = _read_idx(path, IDX_IMAGES_MAGIC, 3)
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    (n,), body = _read_idx(path, IDX_LABELS_MAGIC, 1)
    return np.frombuffer(body, dtype=np.uint8)


def load_idx(images_path: str | Path, labels_path: str | Path,
             n_classes: int = 10) -> LabeledDataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise LengthMismatchError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and labels.max() >= n_classes:
        raise LengthMismatchError(f"label {labels.max()} outside [0, {n_classes})")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), n_classes)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int
    classes_per_client: int
    seed: int

    def validate(self, n_classes: int) -> None:
        if self.n_clients < 1:
            raise ConfigError("need at least one client", "N")
        if not 1 <= self.classes_per_client <= n_classes:
            raise ConfigError(f"must lie in [1, {n_classes}]", "classes_per_client")


@dataclass(frozen=True)
class DataPartition:
    client_id: int
    train: np.ndarray
    eval: np.ndarray
    test: np.ndarray
    seen_classes: tuple[int, ...]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "eval": self.eval, "test": self.test}[name]

    @property
    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.train, self.eval, self.test])


def assign_classes(n_classes: int, plan: PartitionPlan,
                   rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Client k takes ``cpc`` consecutive entries (cyclically) of a shuffled class list."""
    order = rng.permutation(n_classes)
    cpc = plan.classes_per_client
    return [tuple(sorted(int(order[(k * cpc + j) % n_classes]) for j in range(cpc)))
            for k in range(plan.n_clients)]


def partition_noniid(ds: LabeledDataset, plan: PartitionPlan) -> list[DataPartition]:
    plan.validate(ds.n_classes)
    rng = np.random.default_rng(plan.seed)
    assigned = assign_classes(ds.n_classes, plan, rng)

    holders: dict[int, list[int]] = {s: [] for s in range(ds.n_classes)}
    for k, classes in enumerate(assigned):
        for s in classes:
            holders[s].append(k)

    # per client, per class: the sample indices it receives
    shares: list[dict[int, np.ndarray]] = [{} for _ in range(plan.n_clients)]
    for s in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == s)
        if not holders[s]:
            if len(idx):
                log.warning("class %d has no holder; %d samples dropped", s, len(idx))
            continue
        if len(idx) < len(holders[s]):
            raise ConfigError(
                f"class {s} has {len(idx)} samples for {len(holders[s])} clients",
                "classes_per_client")
        idx = rng.permutation(idx)
        for k, part in zip(holders[s], np.array_split(idx, len(holders[s]))):
            shares[k][s] = part

    partitions = []
    for k, classes in enumerate(assigned):
        train, ev, test = [], [], []
        for s in classes:
            part = shares[k][s]
            n_hold = len(part) // 10
            ev.append(part[:n_hold])
            test.append(part[n_hold:2 * n_hold])
            train.append(part[2 * n_hold:])
        partitions.append(DataPartition(
            client_id=k,
            train=np.sort(np.concatenate(train)),
            eval=np.sort(np.concatenate(ev)),
            test=np.sort(np.concatenate(test)),
            seen_classes=classes,
        ))
    return partitions


def dropped_count(ds: LabeledDataset, partitions: list[DataPartition]) -> int:
    used = sum(len(p.all_indices) for p in partitions)
    return len(ds) - used


def batches(train_idx: np.ndarray, batch_size: int,
            seed: int | np.random.Generator) -> Iterator[np.ndarray]:
    """Yield index arrays of one shuffled epoch; the last may be short."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1", "B")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = np.asarray(train_idx)[rng.permutation(len(train_idx))]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]
