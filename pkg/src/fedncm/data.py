"""Labeled feature datasets, embedding files and Dirichlet label-skew partitions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LoadError, ParameterError
from .rng import stream


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``X`` (n x dim) with integer labels ``y`` in ``[0, num_classes)``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ParameterError(f"inconsistent shapes X={X.shape} y={y.shape}")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ParameterError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(X)):
            raise ParameterError("features must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_indices: np.ndarray

    @property
    def n_k(self) -> int:
        return len(self.sample_indices)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 100
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ParameterError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ParameterError("alpha must be > 0")


def _separated_means(C: int, d: int, sep: float, rng: np.random.Generator) -> np.ndarray:
    if C <= d:
        # scaled orthonormal directions are exactly `sep` apart pairwise
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        means = (sep / math.sqrt(2.0)) * q[:, :C].T
        return means - means.mean(axis=0)
    radius = sep * C ** (1.0 / d)
    means: list[np.ndarray] = []
    while len(means) < C:
        for _ in range(1000):
            cand = radius * rng.standard_normal(d)
            if all(np.linalg.norm(cand - m) >= sep for m in means):
                means.append(cand)
                break
        else:
            radius *= 1.5
    out = np.array(means)
    return out - out.mean(axis=0)


def generate_gaussian_mixture(
    C: int,
    d: int,
    per_class: int,
    class_sep: float,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Isotropic Gaussian blobs, one per class, with means at least ``class_sep`` apart.

    Samples are ordered class-major. The class means depend only on
    ``(C, d, class_sep, seed)``, so two calls that differ only in ``per_class``
    share their means and the smaller one is a per-class prefix of the larger.
    """
    if C < 2 or d < 2 or per_class < 1:
        raise ParameterError(f"need C>=2, d>=2, per_class>=1 (got {C}, {d}, {per_class})")
    if noise_sigma < 0 or class_sep < 0:
        raise ParameterError("class_sep and noise_sigma must be non-negative")
    means = _separated_means(C, d, float(class_sep), stream(seed, "mixture-means"))
    X = np.empty((C * per_class, d))
    for c in range(C):
        noise = stream(seed, "mixture-noise", c).standard_normal((per_class, d))
        X[c * per_class:(c + 1) * per_class] = means[c] + noise_sigma * noise
    y = np.repeat(np.arange(C), per_class)
    return Dataset(X, y, C)


def split_per_class(ds: Dataset, first_per_class: int) -> tuple[Dataset, Dataset]:
    """Split into (first ``first_per_class`` of each class, remainder), preserving order."""
    head, tail = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        head.append(idx[:first_per_class])
        tail.append(idx[first_per_class:])
    return ds.subset(np.sort(np.concatenate(head))), ds.subset(np.sort(np.concatenate(tail)))


def synthetic_benchmark(
    seed: int,
    C: int = 10,
    d: int = 16,
    per_class: int = 200,
    test_per_class: int = 100,
    class_sep: float = 4.0,
    noise_sigma: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Train/test pair drawn from one mixture (shared class means)."""
    full = generate_gaussian_mixture(C, d, per_class + test_per_class, class_sep, noise_sigma, seed)
    return split_per_class(full, per_class)


@dataclass(frozen=True)
class DatasetSpec:
    """Where a run's train/test data comes from.

    ``kind="synthetic"`` draws a Gaussian mixture (see :func:`synthetic_benchmark`);
    ``kind="embeddings"`` reads the ``train`` and ``test`` embedding CSVs.
    """

    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 16
    per_class: int = 200
    test_per_class: int = 100
    class_sep: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0
    train: str | None = None
    test: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "embeddings"):
            raise ParameterError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "embeddings" and not (self.train and self.test):
            raise ParameterError("embeddings datasets need both 'train' and 'test' paths")
        if self.kind == "synthetic" and self.test_per_class < 1:
            raise ParameterError("test_per_class must be >= 1")

    def load(self) -> tuple[Dataset, Dataset]:
        if self.kind == "embeddings":
            train, test = load_embeddings(self.train), load_embeddings(self.test)
            if train.dim != test.dim or train.num_classes != test.num_classes:
                raise LoadError(f"{self.test} does not match {self.train} in dim/classes")
            return train, test
        return synthetic_benchmark(
            self.seed, self.num_classes, self.dim, self.per_class,
            self.test_per_class, self.class_sep, self.noise_sigma,
        )


def _parse_header(line: str) -> tuple[int, int]:
    fields = dict(part.split("=", 1) for part in line.strip().split(",") if "=" in part)
    try:
        d, C = int(fields["dim"]), int(fields["classes"])
    except (KeyError, ValueError):
        raise LoadError("expected header 'dim=<d>,classes=<C>'", line=1) from None
    if d < 1 or C < 2:
        raise LoadError("header requires dim >= 1 and classes >= 2", line=1)
    return d, C


def load_embeddings(path: str | Path) -> Dataset:
    """Read an embedding CSV.

    The first line is ``dim=<d>,classes=<C>``; every following line holds
    ``d`` floats and one integer label. ``C`` must equal ``1 + max label``
    and every class below it must be populated.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines[0].strip():
        raise LoadError("empty file", line=1)
    d, C = _parse_header(lines[0])
    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != d + 1:
            raise LoadError(f"expected {d + 1} fields, found {len(parts)}", line=lineno)
        try:
            feats = [float(p) for p in parts[:d]]
            label = int(parts[d])
        except ValueError as exc:
            raise LoadError(f"unparseable value ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in feats):
            raise LoadError("non-finite feature value", line=lineno)
        if not 0 <= label < C:
            raise LoadError(f"label {label} outside [0, {C})", line=lineno)
        rows.append(feats)
        labels.append(label)
    if not rows:
        raise LoadError("no samples after header", line=1)
    y = np.array(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=C)
    if int(y.max()) + 1 != C or np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise LoadError(f"header declares {C} classes but classes {missing} have no samples", line=1)
    return Dataset(np.array(rows, dtype=np.float64), y, C)


def save_embeddings(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim={ds.dim},classes={ds.num_classes}\n")
        for x, label in zip(ds.X, ds.y):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(label)}\n")


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: equal remainders go to the lower client index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``ds`` across ``spec.num_clients`` clients with Dirichlet label skew.

    For each class a proportion vector is drawn from Dirichlet(alpha), turned
    into exact counts by largest-remainder rounding, and the (shuffled)
    samples of that class are dealt out accordingly. Clients may end up empty.
    """
    if len(ds) == 0:
        raise ParameterError("cannot partition an empty dataset")
    K = spec.num_clients
    rng = stream(spec.seed, "partition")
    buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        p = rng.dirichlet(np.full(K, spec.alpha)) if K > 1 else np.ones(1)
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            # extreme alpha underflow: all mass on one client
            p = np.zeros(K)
            p[rng.integers(K)] = 1.0
        p = p / p.sum()
        counts = _largest_remainder(p, len(idx))
        idx = rng.permutation(idx)
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(chunk)
    return [
        ClientShard(k, np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64))
        for k, b in enumerate(buckets)
    ]


def label_histogram(shard: ClientShard, ds: Dataset) -> np.ndarray:
    return np.bincount(ds.y[shard.sample_indices], minlength=ds.num_classes)
