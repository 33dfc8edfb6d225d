"""Synthetic multi-label task, Dirichlet label-skew partitioning and the
server-side proxy validation set.

Every random draw goes through :func:`substream`, which derives an independent
generator from a tuple of integers (seed, purpose tag, ...). Outputs therefore
depend only on the seed and never on call order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import ContractError, Example

# purpose tags for derived random streams
_TRAIN, _TEST, _PROXY, _PARTITION, _PIVOT = 11, 12, 13, 14, 15


def substream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Latent-threshold multi-label task.

    An example draws ``z ~ N(0, I_d)``; label ``c`` is on iff
    ``<z, prototypes[c]> + biases[c] > 0``; the observed features are
    ``z + feature_noise * N(0, I_d)``.
    """

    prototypes: np.ndarray
    biases: np.ndarray
    feature_noise: float = 0.3
    train_size: int = 10_000
    test_size: int = 2_000

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        biases = np.asarray(self.biases, dtype=np.float64)
        if protos.ndim != 2 or biases.shape != (protos.shape[0],):
            raise ContractError("prototypes must be (C, d) and biases (C,)")
        if not np.allclose(np.linalg.norm(protos, axis=1), 1.0):
            raise ContractError("prototypes must be unit-norm")
        if self.feature_noise < 0:
            raise ContractError("feature_noise must be >= 0")
        if self.train_size < 1 or self.test_size < 1:
            raise ContractError("train_size and test_size must be positive")
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "biases", biases)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def build(
        cls,
        dim: int = 32,
        classes: int = 14,
        feature_noise: float = 0.3,
        train_size: int = 10_000,
        test_size: int = 2_000,
        bias: float | Sequence[float] = 0.0,
        prototype_seed: int = 0,
    ) -> "TaskSpec":
        """Random unit-norm prototypes drawn from ``prototype_seed``."""
        if dim < 1 or classes < 1:
            raise ContractError("dim and classes must be positive")
        protos = np.random.default_rng(prototype_seed).standard_normal((classes, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        biases = np.broadcast_to(np.asarray(bias, dtype=np.float64), (classes,)).copy()
        return cls(protos, biases, feature_noise, train_size, test_size)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    role: str

    def __post_init__(self):
        if self.role not in ("train", "test", "proxy_val"):
            raise ContractError(f"unknown dataset role {self.role!r}")
        if self.features.ndim != 2 or self.labels.ndim != 2 or len(self.features) == 0:
            raise ContractError("dataset must be non-empty 2-D features and labels")
        if len(self.features) != len(self.labels):
            raise ContractError("features and labels disagree on example count")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[Example]:
        for x, y in zip(self.features, self.labels):
            yield Example(x, y)

    def subset(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.labels[idx]


def _latent_labels(spec: TaskSpec, z: np.ndarray) -> np.ndarray:
    return (z @ spec.prototypes.T + spec.biases > 0).astype(np.int8)


def _sample(spec: TaskSpec, n: int, rng: np.random.Generator, role: str) -> Dataset:
    z = rng.standard_normal((n, spec.dim))
    noise = rng.standard_normal((n, spec.dim))
    return Dataset(z + spec.feature_noise * noise, _latent_labels(spec, z), role)


def make_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset]:
    train = _sample(spec, spec.train_size, substream(seed, _TRAIN), "train")
    test = _sample(spec, spec.test_size, substream(seed, _TEST), "test")
    return train, test


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    example_indices: np.ndarray
    label_histogram: np.ndarray
    pivot_histogram: np.ndarray

    def __len__(self) -> int:
        return len(self.example_indices)


def assign_pivots(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One pivot class per example, uniform over its positive labels.

    All-zero label vectors pivot to a uniformly random class.
    """
    n, c = labels.shape
    u = rng.random(n)
    counts = labels.sum(axis=1)
    pivots = np.floor(u * c).astype(np.int64)
    has_pos = counts > 0
    k = np.floor(u[has_pos] * counts[has_pos]).astype(np.int64)
    cs = np.cumsum(labels[has_pos], axis=1)
    hit = (cs == (k + 1)[:, None]) & (labels[has_pos] == 1)
    pivots[has_pos] = np.argmax(hit, axis=1)
    return pivots


def dirichlet_partition(train: Dataset, n_clients: int, alpha: float, seed: int) -> list[ClientShard]:
    """Split ``train`` across clients with Dirichlet(alpha) skew over pivot classes."""
    n = len(train)
    if n_clients < 1:
        raise ContractError("need at least one client")
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    if n_clients > n:
        raise ContractError(f"cannot give {n_clients} clients at least one of {n} examples")
    n_classes = train.labels.shape[1]
    pivots = assign_pivots(train.labels, substream(seed, _PIVOT))
    rng = substream(seed, _PARTITION)

    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(n_classes):
        members = rng.permutation(np.flatnonzero(pivots == c))
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props) * len(members)).astype(np.int64)[:-1]
        for k, part in enumerate(np.split(members, cuts)):
            buckets[k].extend(part.tolist())

    for k in range(n_clients):
        if not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())

    shards = []
    for k, bucket in enumerate(buckets):
        idx = np.array(sorted(bucket), dtype=np.int64)
        shards.append(
            ClientShard(
                client_id=k,
                example_indices=idx,
                label_histogram=train.labels[idx].sum(axis=0).astype(np.int64),
                pivot_histogram=np.bincount(pivots[idx], minlength=n_classes),
            )
        )
    return shards


def pivot_entropy(shard: ClientShard) -> float:
    """Shannon entropy (nats) of a shard's pivot-class distribution."""
    p = shard.pivot_histogram[shard.pivot_histogram > 0] / shard.pivot_histogram.sum()
    return float(-np.sum(p * np.log(p)))


def mean_pivot_entropy(shards: Sequence[ClientShard]) -> float:
    return float(np.mean([pivot_entropy(s) for s in shards]))


# name -> (feature_noise, label_flip); ordered least to most faithful
GENERATOR_PRESETS: dict[str, tuple[float, float]] = {
    "sd14": (1.0, 0.3),
    "sd15": (0.75, 0.2),
    "sd20": (0.5, 0.1),
    "sdxl": (0.25, 0.05),
    "roentgen": (0.0, 0.0),
}


@dataclass(frozen=True)
class GeneratorConfig:
    name: str = "roentgen"
    feature_noise: float = 0.0
    label_flip: float = 0.0
    mean_shift: float | tuple[float, ...] = 0.0
    samples_per_class: int = 50

    def __post_init__(self):
        if self.feature_noise < 0:
            raise ContractError("generator feature_noise must be >= 0")
        if not 0.0 <= self.label_flip <= 1.0:
            raise ContractError("label_flip must lie in [0, 1]")
        if self.samples_per_class < 1:
            raise ContractError("samples_per_class must be positive")
        if not isinstance(self.mean_shift, (int, float)):
            object.__setattr__(self, "mean_shift", tuple(float(v) for v in self.mean_shift))

    @classmethod
    def preset(cls, name: str, samples_per_class: int = 50) -> "GeneratorConfig":
        try:
            noise, flip = GENERATOR_PRESETS[name]
        except KeyError:
            raise ContractError(
                f"unknown generator preset {name!r}; choose from {sorted(GENERATOR_PRESETS)}"
            ) from None
        return cls(name, noise, flip, 0.0, samples_per_class)


@dataclass(frozen=True, eq=False)
class ProxyValSet:
    dataset: Dataset
    config: GeneratorConfig
    seed: int
    target_classes: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.dataset)

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels


def make_proxy_valset(spec: TaskSpec, config: GeneratorConfig, seed: int) -> ProxyValSet:
    """Draw ``samples_per_class`` examples per class, each conditioned on its
    target label being on, then degrade them per the generator config."""
    eta, d = config.samples_per_class, spec.dim
    shift = np.broadcast_to(np.asarray(config.mean_shift, dtype=np.float64), (d,))
    budget = 1000 * eta
    feats, labels = [], []
    for c in range(spec.classes):
        rng = substream(seed, _PROXY, c)
        accepted: list[np.ndarray] = []
        n_accepted = drawn = 0
        while n_accepted < eta:
            if drawn >= budget:
                raise ContractError(
                    f"class {c} unreachable: {n_accepted}/{eta} samples after {drawn} draws"
                )
            chunk = min(4 * eta, budget - drawn)
            z = rng.standard_normal((chunk, d))
            drawn += chunk
            keep = z[z @ spec.prototypes[c] + spec.biases[c] > 0]
            accepted.append(keep)
            n_accepted += len(keep)
        z = np.concatenate(accepted)[:eta]
        # noise and flip draws happen unconditionally so knobs do not shift the stream
        task_noise = rng.standard_normal((eta, d))
        gen_noise = rng.standard_normal((eta, d))
        flip_u = rng.random((eta, spec.classes))
        x = z + spec.feature_noise * task_noise + config.feature_noise * gen_noise + shift
        y = _latent_labels(spec, z)
        y = np.where(flip_u < config.label_flip, 1 - y, y).astype(np.int8)
        feats.append(x)
        labels.append(y)
    targets = np.repeat(np.arange(spec.classes), eta)
    ds = Dataset(np.concatenate(feats), np.concatenate(labels), "proxy_val")
    return ProxyValSet(ds, config, seed, targets)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for x, y in zip(dataset.features, dataset.labels):
            fh.write(json.dumps({"features": [float(v) for v in x], "labels": [int(v) for v in y]}))
            fh.write("\n")


def read_jsonl(path: str | Path, role: str) -> Dataset:
    feats, labels = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                feats.append(row["features"])
                labels.append(row["labels"])
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int8), role)


def write_shards_jsonl(shards: Sequence[ClientShard], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in shards:
            row = {
                "client_id": s.client_id,
                "example_indices": s.example_indices.tolist(),
                "label_histogram": s.label_histogram.tolist(),
            }
            fh.write(json.dumps(row) + "\n")
