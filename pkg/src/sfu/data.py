"""Synthetic data, non-iid client partitioning, forget/retain splits and backdoors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, InputError

DATASET_FORMAT = "sfu-dataset v1"


class BackdoorNoEffectWarning(UserWarning):
    """inject_backdoor found no sample to poison."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix plus integer labels.

    ``source_labels`` records the label each sample had before any
    relabelling by a backdoor; forget/retain splitting follows it so that a
    poisoned sample still belongs to the data owner who asked to forget it.
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    source_labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim == 1 and x.size == 0:
            x = x.reshape(0, 0)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise InputError(f"samples {x.shape} and labels {y.shape} are not aligned")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        src = None
        if self.source_labels is not None:
            src = np.asarray(self.source_labels, dtype=np.int64)
            if src.shape != y.shape:
                raise InputError("source_labels not aligned with labels")
            src.flags.writeable = False
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "source_labels", src)

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def origin_labels(self) -> np.ndarray:
        return self.labels if self.source_labels is None else self.source_labels

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        src = None if self.source_labels is None else self.source_labels[idx]
        return LabeledDataset(self.samples[idx], self.labels[idx], self.num_classes, src)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def same_as(self, other: "LabeledDataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.origin_labels, other.origin_labels)
        )


def empty_like(ds: LabeledDataset) -> LabeledDataset:
    return LabeledDataset(np.zeros((0, ds.dim)), np.zeros(0, dtype=np.int64), ds.num_classes)


def concat(parts: Iterable[LabeledDataset]) -> LabeledDataset:
    parts = list(parts)
    if not parts:
        raise InputError("nothing to concatenate")
    src = None
    if any(p.source_labels is not None for p in parts):
        src = np.concatenate([p.origin_labels for p in parts])
    return LabeledDataset(
        np.concatenate([p.samples for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
        src,
    )


@dataclass(frozen=True)
class ClientPartition:
    client_shards: tuple[np.ndarray, ...]

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=np.int64) for s in self.client_shards)
        object.__setattr__(self, "client_shards", shards)

    def __len__(self):
        return len(self.client_shards)

    def shard(self, ds: LabeledDataset, client_id: int) -> LabeledDataset:
        return ds.subset(self.client_shards[client_id])

    def check(self, n: int) -> None:
        """Raise unless shards are non-empty, disjoint and cover ``range(n)``."""
        if any(s.size == 0 for s in self.client_shards):
            raise InputError("empty client shard")
        merged = np.sort(np.concatenate(self.client_shards))
        if merged.size != n or not np.array_equal(merged, np.arange(n)):
            raise InputError("shards do not partition the dataset")


@dataclass(frozen=True)
class ForgetSpec:
    target_classes: frozenset[int]
    num_classes: int

    def __post_init__(self):
        targets = frozenset(int(c) for c in self.target_classes)
        object.__setattr__(self, "target_classes", targets)
        if not targets:
            raise ConfigError("at least one class must be forgotten", "target_classes")
        if any(c < 0 or c >= self.num_classes for c in targets):
            raise ConfigError(f"target classes must lie in [0, {self.num_classes})", "target_classes")
        if len(targets) >= self.num_classes:
            raise ConfigError("cannot forget every class", "target_classes")

    def mask(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        out = np.zeros(labels.shape, dtype=bool)
        for c in self.target_classes:
            out |= labels == c
        return out


@dataclass(frozen=True)
class BackdoorSpec:
    trigger_mask: tuple[int, ...]
    trigger_value: float
    attack_target: int
    poison_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "trigger_mask", tuple(int(i) for i in self.trigger_mask))
        if not self.trigger_mask:
            raise ConfigError("trigger mask must not be empty", "trigger_mask")
        if min(self.trigger_mask) < 0:
            raise ConfigError("trigger indices must be non-negative", "trigger_mask")
        if not 0 < self.poison_fraction <= 1:
            raise ConfigError("poison fraction must lie in (0, 1]", "poison_fraction")
        if self.attack_target < 0:
            raise ConfigError("attack target must be a class index", "attack_target")

    def validate_for(self, dim: int, num_classes: int) -> None:
        if max(self.trigger_mask) >= dim:
            raise ConfigError(f"trigger index outside feature range [0, {dim})", "trigger_mask")
        if self.attack_target >= num_classes:
            raise ConfigError(f"attack target outside [0, {num_classes})", "attack_target")


def class_centroids(K: int, d: int, scale: float = 1.0) -> np.ndarray:
    """Centroid k sits on axis ``k % d``, pushed further out on each wrap."""
    centroids = np.zeros((K, d))
    for k in range(K):
        centroids[k, k % d] = scale * (1 + k // d)
    return centroids


def gen_synthetic(K: int, d: int, n_per_class: int, spread: float, seed, scale: float = 1.0) -> LabeledDataset:
    """Isotropic Gaussian blobs, ``n_per_class`` samples each, class-major order."""
    if K < 2 or d < 1 or n_per_class < 1:
        raise ConfigError(f"invalid sizes K={K}, d={d}, n_per_class={n_per_class}")
    if not spread > 0 or not scale > 0:
        raise ConfigError("spread and scale must be positive", "spread")
    rng = np.random.default_rng(seed)
    centroids = class_centroids(K, d, scale)
    labels = np.repeat(np.arange(K), n_per_class)
    samples = centroids[labels] + spread * rng.standard_normal((labels.size, d))
    return LabeledDataset(samples, labels, K)


def dirichlet_partition(ds: LabeledDataset, N: int, beta: float, seed) -> ClientPartition:
    """Per-class Dirichlet(beta) shares over ``N`` clients."""
    if N < 2:
        raise ConfigError("need at least two clients", "num_clients")
    if not beta > 0:
        raise ConfigError("Dirichlet concentration must be positive", "beta")
    if len(ds) < N:
        raise ConfigError(f"{len(ds)} samples cannot fill {N} non-empty shards", "num_clients")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(N)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(N, beta))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            shards[client].extend(part.tolist())

    # extreme draws can leave a client with nothing
    for client in range(N):
        if not shards[client]:
            donor = max(range(N), key=lambda j: (len(shards[j]), -j))
            shards[client].append(shards[donor].pop())

    return ClientPartition(tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in shards))


def split_forget_retain(shard: LabeledDataset, spec: ForgetSpec) -> tuple[LabeledDataset, LabeledDataset]:
    mask = spec.mask(shard.origin_labels)
    return shard.subset(np.flatnonzero(mask)), shard.subset(np.flatnonzero(~mask))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inject_backdoor(ds: LabeledDataset, spec: BackdoorSpec, restrict_to, seed) -> LabeledDataset:
    """Stamp the trigger on a fraction of samples from ``restrict_to`` classes and relabel them."""
    restrict = sorted(int(c) for c in restrict_to)
    if not restrict:
        raise ConfigError("restrict_to must name at least one class", "restrict_to")
    spec.validate_for(ds.dim, ds.num_classes)
    eligible = np.flatnonzero(np.isin(ds.labels, restrict))
    count = _round_half_up(spec.poison_fraction * eligible.size)
    if eligible.size == 0 or count == 0:
        if eligible.size == 0:
            warnings.warn(f"no samples with labels in {restrict}; nothing poisoned", BackdoorNoEffectWarning)
        return ds
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))

    samples = np.array(ds.samples)
    labels = np.array(ds.labels)
    source = np.array(ds.origin_labels)
    samples[np.ix_(chosen, spec.trigger_mask)] = spec.trigger_value
    labels[chosen] = spec.attack_target
    return LabeledDataset(samples, labels, ds.num_classes, source)


def apply_trigger_only(ds: LabeledDataset, spec: BackdoorSpec) -> LabeledDataset:
    if len(ds) == 0:
        return ds
    if max(spec.trigger_mask) >= ds.dim:
        raise ConfigError(f"trigger index outside feature range [0, {ds.dim})", "trigger_mask")
    samples = np.array(ds.samples)
    samples[:, list(spec.trigger_mask)] = spec.trigger_value
    return LabeledDataset(samples, ds.labels, ds.num_classes, ds.source_labels)


def save_dataset(ds: LabeledDataset, path) -> None:
    """Write a CSV table: a ``#`` header line, column names, then one sample per row.

    Columns are ``f0..f{d-1},label`` plus ``source_label`` when the dataset
    carries pre-poisoning labels. Floats are written with 17 significant
    digits so a load reproduces the exact values.
    """
    has_src = ds.source_labels is not None
    cols = [f"f{j}" for j in range(ds.dim)] + ["label"] + (["source_label"] if has_src else [])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {DATASET_FORMAT} num_classes={ds.num_classes} dim={ds.dim} rows={len(ds)}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.samples[i]] + [str(int(ds.labels[i]))]
            if has_src:
                row.append(str(int(ds.source_labels[i])))
            fh.write(",".join(row) + "\n")


def load_dataset(path) -> LabeledDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"# {DATASET_FORMAT}"):
        raise InputError(f"{path}: not a {DATASET_FORMAT} file")
    meta = dict(tok.split("=", 1) for tok in lines[0][2 + len(DATASET_FORMAT):].split())
    K, d = int(meta["num_classes"]), int(meta["dim"])
    cols = lines[1].split(",")
    has_src = cols[-1] == "source_label"
    rows = [ln.split(",") for ln in lines[2:] if ln]
    if len(rows) != int(meta["rows"]):
        raise InputError(f"{path}: expected {meta['rows']} rows, found {len(rows)}")
    samples = np.array([[float(v) for v in r[:d]] for r in rows]).reshape(len(rows), d)
    labels = np.array([int(r[d]) for r in rows], dtype=np.int64)
    src = np.array([int(r[d + 1]) for r in rows], dtype=np.int64) if has_src else None
    return LabeledDataset(samples, labels, K, src)
