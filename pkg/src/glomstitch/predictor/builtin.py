"""Deterministic built-in predictors.

None of these are learned models. The threshold oracle emits confident
logits for a known truth window; the border-degraded predictor adds the
patch-border failure mode that overlap stitching is meant to repair.
"""

from __future__ import annotations

import zlib

import numpy as np

from .. import rng
from ..errors import ShapeMismatch
from ..scoremap import SCORE_DTYPE
from ..tiler import TileSpec

MARGIN = 4.0
DEGRADED_MARGIN = 1.0
BACKGROUND = 0
FOREGROUND = 1

# stream ids keep the noise and flip draws independent
NOISE_STREAM = 0x6E6F697365
FLIP_STREAM = 0x666C6970


def _check_window(patch: np.ndarray, truth_window: np.ndarray) -> np.ndarray:
    truth_window = np.asarray(truth_window)
    if truth_window.ndim != 2 or truth_window.shape != np.shape(patch)[:2]:
        raise ShapeMismatch(f"truth window {truth_window.shape} does not match patch {np.shape(patch)[:2]}")
    return truth_window


def patch_key(patch: np.ndarray) -> int:
    """Stable integer key derived from the patch bytes."""
    patch = np.ascontiguousarray(patch, dtype=np.uint8)
    return zlib.crc32(patch.tobytes()) ^ (patch.shape[0] << 32) ^ (patch.shape[1] << 48)


def threshold_oracle_predict(patch: np.ndarray, truth_window: np.ndarray, noise: float = 0.0,
                             classes: int = 2, seed: int = 0) -> np.ndarray:
    """Logit ``+MARGIN`` for the true class and ``-MARGIN`` elsewhere, plus bounded noise.

    Noise is uniform in ``[-noise, noise]`` and keyed by (seed, patch bytes,
    class, pixel); while ``noise < MARGIN`` the argmax reproduces the truth.
    """
    truth = _check_window(patch, truth_window)
    if truth.size and int(truth.max()) >= classes:
        raise ShapeMismatch(f"truth label {int(truth.max())} outside [0, {classes})")
    h, w = truth.shape
    scores = np.full((classes, h, w), -MARGIN, dtype=SCORE_DTYPE)
    np.put_along_axis(scores, truth[None].astype(np.intp), MARGIN, axis=0)
    if noise > 0:
        c = np.arange(classes)[:, None, None]
        r = np.arange(h)[None, :, None]
        q = np.arange(w)[None, None, :]
        u = rng.uniform(seed, NOISE_STREAM, patch_key(patch), c, r, q)
        scores += ((2.0 * u - 1.0) * noise).astype(SCORE_DTYPE)
    return scores


def border_zone(height: int, width: int, border_frac: float) -> np.ndarray:
    """Boolean mask of pixels within ``border_frac * side`` of any patch edge."""
    by, bx = int(border_frac * height), int(border_frac * width)
    rows = np.arange(height)
    cols = np.arange(width)
    row_border = (rows < by) | (rows >= height - by)
    col_border = (cols < bx) | (cols >= width - bx)
    return row_border[:, None] | col_border[None, :]


def flip_draws(seed: int, tile_x: int, tile_y: int, height: int, width: int) -> np.ndarray:
    """Uniform draws keyed by (seed, tile origin, local pixel)."""
    r = np.arange(height)[:, None]
    q = np.arange(width)[None, :]
    return rng.uniform(seed, FLIP_STREAM, tile_x, tile_y, r, q)


def border_degraded_predict(patch: np.ndarray, truth_window: np.ndarray, border_frac: float,
                            flip_prob: float, seed: int, tile_x: int = 0, tile_y: int = 0,
                            noise: float = 0.0, classes: int = 2,
                            degraded_margin: float = DEGRADED_MARGIN) -> np.ndarray:
    """Threshold-oracle scores with foreground lost near the patch border.

    Each foreground pixel in the border zone is, with probability
    ``flip_prob``, scored as background with the weaker ``degraded_margin``
    (background ``+d``, every other class ``-d``).
    """
    if not 0.0 <= border_frac <= 0.5:
        raise ValueError(f"border_frac must be in [0, 0.5], got {border_frac}")
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip_prob must be in [0, 1], got {flip_prob}")
    scores = threshold_oracle_predict(patch, truth_window, noise=noise, classes=classes, seed=seed)
    if border_frac == 0 or flip_prob == 0:
        return scores
    truth = np.asarray(truth_window)
    h, w = truth.shape
    flip = border_zone(h, w, border_frac) & (truth != BACKGROUND)
    flip &= flip_draws(seed, tile_x, tile_y, h, w) < flip_prob
    scores[:, flip] = -degraded_margin
    scores[BACKGROUND, flip] = degraded_margin
    return scores


# ---------------------------------------------------------------------------
# truth sources and predictor objects


def intensity_truth(patch: np.ndarray, threshold: float = 150.0) -> np.ndarray:
    """Foreground wherever the mean channel intensity is below ``threshold``."""
    patch = np.asarray(patch)
    gray = patch.mean(axis=2) if patch.ndim == 3 else patch
    return (gray < threshold).astype(np.uint8)


class _TruthMixin:
    """Resolves the truth window for a patch from a raster or from intensity."""

    def _truth_window(self, patch: np.ndarray, tile: TileSpec | None) -> np.ndarray:
        if self.truth is None:
            return intensity_truth(patch, self.intensity_threshold)
        if tile is None:
            raise ValueError("a raster truth source needs the tile position")
        h, w = np.shape(patch)[:2]
        return self.truth.read_window(tile.x, tile.y, w, h)[..., 0]


class ThresholdOraclePredictor(_TruthMixin):
    """Oracle predictor over a truth raster, or over intensity when ``truth`` is None."""

    def __init__(self, truth=None, noise: float = 0.0, seed: int = 0, classes: int = 2,
                 input_size: int = 768, intensity_threshold: float = 150.0):
        self.truth = truth
        self.noise = noise
        self.seed = seed
        self.classes = classes
        self.input_size = input_size
        self.intensity_threshold = intensity_threshold

    def predict(self, patch: np.ndarray, tile: TileSpec | None = None) -> np.ndarray:
        return threshold_oracle_predict(patch, self._truth_window(patch, tile), noise=self.noise,
                                        classes=self.classes, seed=self.seed)


class BorderDegradedPredictor(_TruthMixin):
    def __init__(self, truth=None, border_frac: float = 0.125, flip_prob: float = 0.8, seed: int = 0,
                 noise: float = 0.0, classes: int = 2, input_size: int = 768,
                 intensity_threshold: float = 150.0, degraded_margin: float = DEGRADED_MARGIN):
        if not 0.0 <= border_frac <= 0.5 or not 0.0 <= flip_prob <= 1.0:
            raise ValueError("border_frac must be in [0, 0.5] and flip_prob in [0, 1]")
        self.truth = truth
        self.border_frac = border_frac
        self.flip_prob = flip_prob
        self.seed = seed
        self.noise = noise
        self.classes = classes
        self.input_size = input_size
        self.intensity_threshold = intensity_threshold
        self.degraded_margin = degraded_margin

    def predict(self, patch: np.ndarray, tile: TileSpec | None = None) -> np.ndarray:
        tx, ty = (tile.x, tile.y) if tile is not None else (0, 0)
        return border_degraded_predict(patch, self._truth_window(patch, tile), self.border_frac,
                                       self.flip_prob, self.seed, tile_x=tx, tile_y=ty, noise=self.noise,
                                       classes=self.classes, degraded_margin=self.degraded_margin)


class ConstantPredictor:
    """Emits the same per-class score at every pixel."""

    def __init__(self, values, input_size: int = 768):
        self.values = np.asarray(values, dtype=SCORE_DTYPE)
        if self.values.ndim != 1 or self.values.size < 2:
            raise ValueError("need one score per class, at least two classes")
        self.classes = self.values.size
        self.input_size = input_size

    def predict(self, patch: np.ndarray, tile: TileSpec | None = None) -> np.ndarray:
        h, w = np.shape(patch)[:2]
        return np.broadcast_to(self.values[:, None, None], (self.classes, h, w)).copy()
