"""Seeded, splittable random streams.

Every stochastic step draws from a generator keyed by ``(seed, tag, *ints)``
so results do not depend on call order or on how work is scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *keys)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = (_tag_key(tag),) + tuple(int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))
