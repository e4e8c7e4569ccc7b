"""Independent reference implementations used as test oracles.

Each oracle is written from the definition, as slowly and plainly as
practical, without calling the code under test.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


# --- counter-based RNG, pure Python ------------------------------------------

def splitmix64_next(state: int) -> tuple[int, int]:
    """One step of the reference SplitMix64 generator: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def keyed_hash_py(seed: int, *keys: int) -> int:
    """Chain SplitMix64 outputs: each key is xored into the state and re-mixed."""
    _, h = splitmix64_next(seed & MASK64)
    for k in keys:
        _, h = splitmix64_next((h ^ (k & MASK64)) & MASK64)
    return h


def uniform_py(seed: int, *keys: int) -> float:
    return (keyed_hash_py(seed, *keys) >> 11) / float(1 << 53)


# --- tiling -------------------------------------------------------------------

def brute_origins(dim: int, tile: int, stride: int) -> list[int]:
    """Walk the axis: step by stride while a full window fits, then one flush window at the end."""
    if dim <= tile:
        return [0]
    out = []
    pos = 0
    while pos + tile <= dim:
        out.append(pos)
        pos += stride
    if out[-1] + tile < dim:
        out.append(dim - tile)
    return out


# --- stitching ----------------------------------------------------------------

def dense_sums(width: int, height: int, tiles, scores, classes: int) -> np.ndarray:
    """Full-raster float64 sum of tile scores, clipping overhang at the raster edge."""
    total = np.zeros((classes, height, width), dtype=np.float64)
    for (x, y, size), s in zip(tiles, scores):
        h, w = min(size, height - y), min(size, width - x)
        total[:, y:y + h, x:x + w] += s[:classes, :h, :w]
    return total


def softmax_argmax(sums: np.ndarray) -> np.ndarray:
    """Per-pixel softmax then first-maximum argmax, written out explicitly."""
    m = sums.max(axis=0, keepdims=True)
    e = np.exp(sums - m)
    p = e / e.sum(axis=0, keepdims=True)
    best = np.zeros(p.shape[1:], dtype=np.int64)
    best_val = p[0].copy()
    for c in range(1, p.shape[0]):
        better = p[c] > best_val
        best[better] = c
        best_val = np.where(better, p[c], best_val)
    return best


def pixel_argmax(values) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


# --- Dice ---------------------------------------------------------------------

def dice_counts(pred, truth):
    inter = pa = ta = 0
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist()):
        p, t = p != 0, t != 0
        inter += p and t
        pa += p
        ta += t
    return inter, pa, ta


def dice_value(pred, truth) -> float:
    inter, pa, ta = dice_counts(pred, truth)
    return 1.0 if pa + ta == 0 else 2 * inter / (pa + ta)


# --- random scores ------------------------------------------------------------

def dyadic_scores(gen: np.random.Generator, shape, step: float = 2.0 ** -8, bound: float = 8.0) -> np.ndarray:
    """Random float32 logits on a dyadic lattice, so sums are exact in float32 and float64."""
    k = gen.integers(-int(bound / step), int(bound / step) + 1, size=shape)
    return (k * step).astype(np.float32)
