"""Counter-based deterministic random streams.

Every random draw in the package is a pure function of a seed and a tuple of
integer keys (tile origin, pixel index, object index, ...). Nothing carries
hidden state, so results do not depend on evaluation order or worker count.

The mixer is the SplitMix64 finalizer, applied once per key.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GAMMA = np.uint64(GAMMA)


def _as_u64(value) -> np.ndarray:
    if isinstance(value, (int, np.integer)):
        return np.asarray(int(value) & MASK64, dtype=np.uint64)
    arr = np.asarray(value)
    if arr.dtype.kind not in "iu":
        raise TypeError(f"keys must be integers, got {arr.dtype}")
    return arr.astype(np.uint64)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def keyed_hash(seed, *keys) -> np.ndarray:
    """64-bit hash of ``(seed, *keys)``; keys broadcast like numpy arrays."""
    with np.errstate(over="ignore"):
        h = _mix(_as_u64(seed) + _GAMMA)
        for key in keys:
            h = _mix((h ^ _as_u64(key)) + _GAMMA)
    return h


def uniform(seed, *keys) -> np.ndarray:
    """Uniform float64 draws in [0, 1) with 53 bits of resolution."""
    h = keyed_hash(seed, *keys)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def uniform_range(low: float, high: float, seed, *keys) -> np.ndarray:
    return low + (high - low) * uniform(seed, *keys)
