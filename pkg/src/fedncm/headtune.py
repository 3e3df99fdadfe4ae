"""FedNCM: per-client class sums, exact server-side class means, NCM head init."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard, Dataset
from .errors import ShapeError, StateError
from .model import ModelParams, features


@dataclass
class ClassStats:
    """What one client sends back: per-class feature sums and sample counts.

    Only classes present on the client appear as keys.
    """

    client_id: int
    sums: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int | None:
        for v in self.sums.values():
            return len(v)
        return None

    def message_size(self, feature_dim: int) -> int:
        """Bytes of the wire message (see :func:`encode_class_stats`)."""
        return 4 + len(self.counts) * (8 + 4 * feature_dim)


@dataclass(frozen=True)
class Centroids:
    means: np.ndarray  # (C, d_out); rows of invalid classes are zero
    global_counts: np.ndarray
    valid_mask: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def local_class_stats(shard: ClientShard, ds: Dataset, params: ModelParams) -> ClassStats:
    """One forward pass over the client's samples, summed per class."""
    idx = np.sort(np.asarray(shard.sample_indices, dtype=np.int64))
    stats = ClassStats(shard.client_id)
    if len(idx) == 0:
        return stats
    feats = features(params, ds.X[idx])
    labels = ds.y[idx]
    for c in np.unique(labels):
        rows = feats[labels == c]
        stats.sums[int(c)] = rows.sum(axis=0)
        stats.counts[int(c)] = int(rows.shape[0])
    return stats


def aggregate_centroids(stats: list[ClassStats], C: int) -> Centroids:
    """Server reduction: ``l_c = sum_k m_c^k / D_c`` with clients summed by ascending id."""
    ordered = sorted(stats, key=lambda s: s.client_id)
    ids = [s.client_id for s in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids in class stats")
    dims = {s.feature_dim for s in ordered} - {None}
    if len(dims) > 1:
        raise ShapeError(f"class stats disagree on feature dimension: {sorted(dims)}")
    d = dims.pop() if dims else 0
    totals = np.zeros((C, d))
    counts = np.zeros(C, dtype=np.int64)
    for s in ordered:
        for c, vec in s.sums.items():
            if not 0 <= c < C:
                raise ShapeError(f"class {c} outside [0, {C})")
            totals[c] += vec
            counts[c] += s.counts[c]
    valid = counts > 0
    means = np.zeros_like(totals)
    means[valid] = totals[valid] / counts[valid, None]
    return Centroids(means, counts, valid)


def ncm_distances(X: np.ndarray, centroids: Centroids) -> np.ndarray:
    diff = np.atleast_2d(X)[:, None, :] - centroids.means[None, :, :]
    return np.sqrt(np.einsum("ncd,ncd->nc", diff, diff))


def ncm_predict(X: np.ndarray, centroids: Centroids) -> np.ndarray:
    if not centroids.valid_mask.any():
        raise StateError("no class has any samples")
    dist = ncm_distances(X, centroids)
    dist[:, ~centroids.valid_mask] = np.inf
    return np.argmin(dist, axis=1)


def ncm_classify(features: np.ndarray, centroids: Centroids) -> int:
    """Nearest valid class mean in Euclidean distance; ties go to the lower index."""
    return int(ncm_predict(np.asarray(features, dtype=np.float64)[None, :], centroids)[0])


def init_head_from_centroids(centroids: Centroids) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``l_c / ||l_c||`` (zero for invalid or zero-norm classes), zero bias."""
    norms = np.linalg.norm(centroids.means, axis=1)
    ok = centroids.valid_mask & (norms > 0)
    V = np.zeros_like(centroids.means)
    V[ok] = centroids.means[ok] / norms[ok, None]
    return V, np.zeros(centroids.num_classes)


def encode_class_stats(stats: ClassStats, feature_dim: int) -> bytes:
    """Little-endian message: u32 client_id, then per class u32 index, u32 count, float32 sum."""
    out = [struct.pack("<I", stats.client_id)]
    for c in sorted(stats.counts):
        vec = np.asarray(stats.sums[c], dtype="<f4")
        if vec.shape != (feature_dim,):
            raise ShapeError(f"class {c} sum has shape {vec.shape}, expected ({feature_dim},)")
        out.append(struct.pack("<II", c, stats.counts[c]) + vec.tobytes())
    return b"".join(out)


def decode_class_stats(message: bytes, feature_dim: int) -> ClassStats:
    record = 8 + 4 * feature_dim
    if len(message) < 4 or (len(message) - 4) % record:
        raise ShapeError(f"message of {len(message)} bytes does not fit feature_dim={feature_dim}")
    (client_id,) = struct.unpack_from("<I", message, 0)
    stats = ClassStats(client_id)
    for off in range(4, len(message), record):
        c, n = struct.unpack_from("<II", message, off)
        stats.counts[c] = n
        stats.sums[c] = np.frombuffer(message, dtype="<f4", count=feature_dim, offset=off + 8).astype(np.float64)
    return stats
