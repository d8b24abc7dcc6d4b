"""Counter-based pseudo-random numbers for the stochastic operations.

Each draw is a pure function of (seed, stream label, counter), so results
do not depend on evaluation order or parallel scheduling. The stream key
is derived from the label with keyed BLAKE2b, and individual values come
from the SplitMix64 finalizer applied to key + counter, taking the top
53 bits as a uniform in [0, 1).
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def stream_key(seed: int, label: str) -> int:
    """Derive the 64-bit key of the (seed, label) stream."""
    digest = hashlib.blake2b(
        label.encode("utf-8"),
        digest_size=8,
        key=int(seed).to_bytes(8, "little", signed=True),
    ).digest()
    return int.from_bytes(digest, "little")


def _mix(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform(seed: int, label: str, count: int, start: int = 0) -> np.ndarray:
    """Uniform [0, 1) float64 values at counters start..start+count-1."""
    key = np.uint64(stream_key(seed, label))
    counters = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix(key + counters)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
