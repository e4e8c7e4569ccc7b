"""Patch-to-score-map predictors.

A predictor is any object with ``classes``, ``input_size`` and
``predict(patch, tile=None) -> (C, H, W) float32`` raw logits for an
``(H, W, 3)`` uint8 patch. ``tile`` is the patch's TileSpec when known.
"""

from typing import Protocol

import numpy as np

from ..tiler import TileSpec
from .builtin import (
    BorderDegradedPredictor,
    ConstantPredictor,
    ThresholdOraclePredictor,
    border_degraded_predict,
    intensity_truth,
    threshold_oracle_predict,
)
from .client import ExternalPredictor


class Predictor(Protocol):
    classes: int
    input_size: int

    def predict(self, patch: np.ndarray, tile: TileSpec | None = None) -> np.ndarray: ...


def external_predict(endpoint, patch: np.ndarray, timeout: float = 60.0) -> np.ndarray:
    """One-shot request to an endpoint string or an already-open ExternalPredictor."""
    if isinstance(endpoint, ExternalPredictor):
        return endpoint.predict(patch)
    with ExternalPredictor.connect(endpoint, timeout=timeout) as client:
        return client.predict(patch)


__all__ = [
    "Predictor",
    "BorderDegradedPredictor",
    "ConstantPredictor",
    "ExternalPredictor",
    "ThresholdOraclePredictor",
    "border_degraded_predict",
    "external_predict",
    "intensity_truth",
    "threshold_oracle_predict",
]
