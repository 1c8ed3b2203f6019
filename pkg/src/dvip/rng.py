"""Counter-based random streams.

Every draw is a pure function of an integer key tuple, so a batch of points
gets the same noise regardless of its order or size, and any training
iteration can be replayed without stepping a stateful generator.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream tags keep unrelated draws on disjoint keys
PRIOR = 1
LAYER = 2
INIT = 3
DATA = 4


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _hash(*keys) -> np.ndarray:
    arrays = np.broadcast_arrays(*[np.asarray(k, dtype=np.int64).astype(np.uint64) for k in keys])
    h = np.zeros(arrays[0].shape, dtype=np.uint64)
    for k in arrays:
        h = _splitmix(h ^ k)
    return h


def keyed_normals(*keys) -> np.ndarray:
    """Standard normal draws, one per element of the broadcast key arrays."""
    with np.errstate(over="ignore"):
        h = _hash(*keys)
        u1 = (_splitmix(h ^ np.uint64(1)) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        u2 = (_splitmix(h ^ np.uint64(2)) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def generator(*keys: int) -> np.random.Generator:
    """A numpy Generator seeded from a key tuple, for draws not tied to data points."""
    return np.random.default_rng([int(k) for k in keys])
