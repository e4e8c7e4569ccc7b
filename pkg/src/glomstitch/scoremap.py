"""Per-class score planes and their finalization into label masks.

Arrays follow one layout throughout the package:

* score map: ``(C, H, W)`` float32 raw logits, C >= 2
* prob map: ``(C, H, W)`` floats summing to 1 over axis 0
* label mask: ``(H, W)`` uint8 class indices
"""

from __future__ import annotations

import numpy as np

from .errors import IndexOutOfRange, NonFiniteInput, ShapeMismatch

SCORE_DTYPE = np.float32
LABEL_DTYPE = np.uint8


def check_scores(scores: np.ndarray, classes: int | None = None, height: int | None = None,
                 width: int | None = None) -> np.ndarray:
    """Validate a score map's layout and finiteness, returning it as an ndarray."""
    scores = np.asarray(scores)
    if scores.ndim != 3 or scores.shape[0] < 2:
        raise ShapeMismatch(f"score map must be (C>=2, H, W), got shape {scores.shape}")
    expected = (classes, height, width)
    for axis, want in enumerate(expected):
        if want is not None and scores.shape[axis] != want:
            raise ShapeMismatch(f"score map shape {scores.shape} does not match expected "
                                f"{tuple(e if e is not None else '*' for e in expected)}")
    if not np.isfinite(scores).all():
        raise NonFiniteInput("score map contains NaN or Inf")
    return scores


def softmax_normalize(scores: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Softmax across the class axis, stabilized by subtracting the per-pixel max."""
    scores = check_scores(scores)
    z = scores.astype(np.float64, copy=True)
    z -= z.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z.astype(dtype, copy=False)


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Per-pixel index of the largest class score.

    ``np.argmax`` returns the first maximal index, so ties go to the lowest class.
    """
    scores = check_scores(scores)
    if scores.shape[0] > np.iinfo(LABEL_DTYPE).max + 1:
        raise ShapeMismatch(f"too many classes for uint8 labels: {scores.shape[0]}")
    return np.argmax(scores, axis=0).astype(LABEL_DTYPE)


def binarize(mask: np.ndarray, foreground_class: int, classes: int | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    upper = classes if classes is not None else np.iinfo(LABEL_DTYPE).max + 1
    if not 0 <= foreground_class < upper:
        raise IndexOutOfRange(f"foreground class {foreground_class} outside [0, {upper})")
    return (mask == foreground_class).astype(LABEL_DTYPE)
