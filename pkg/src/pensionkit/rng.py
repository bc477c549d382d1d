"""Counter-based random draws keyed by (seed, purpose tag, worker id, counter).

Every draw is a pure function of its key, so results do not depend on the
order in which workers are generated or on how work is split across threads.
The mixer is SplitMix64's finalizer applied to a combined 64-bit key.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def _keys(seed: int, tag: str, ids, counter) -> np.ndarray:
    ids = np.asarray(ids).astype(np.uint64)
    ctr = np.asarray(counter).astype(np.uint64)
    base = _mix(np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(tag_key(tag))]))
    with np.errstate(over="ignore"):
        k = _mix(base ^ _mix(ids))
        return _mix(k ^ _mix(ctr * _M2))


def uniforms(seed: int, tag: str, ids, counter=0) -> np.ndarray:
    """Uniform draws on the open interval (0, 1), broadcast over ids and counter."""
    bits = _keys(seed, tag, ids, counter) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, tag: str, ids, counter=0) -> np.ndarray:
    return ndtri(uniforms(seed, tag, ids, counter))


def integers(seed: int, tag: str, ids, high: int, counter=0) -> np.ndarray:
    """Integers in [0, high)."""
    return np.minimum((uniforms(seed, tag, ids, counter) * high).astype(np.int64), high - 1)


def substream_seed(seed: int, tag: str, index: int) -> int:
    """Derived 64-bit seed, e.g. one per bootstrap replicate."""
    return int(_keys(seed, tag, [index], 0)[0])
