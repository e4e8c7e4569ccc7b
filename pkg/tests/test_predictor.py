import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glomstitch.predictor import BorderDegradedPredictor, ConstantPredictor, ThresholdOraclePredictor
from glomstitch.predictor.builtin import (FLIP_STREAM, MARGIN, border_degraded_predict, border_zone,
                                          intensity_truth, threshold_oracle_predict)
from glomstitch.scoremap import argmax_labels
from glomstitch.synthbench import SynthSlideSpec, SyntheticSlide
from glomstitch.tiler import RasterExtent, TileSpec
from oracles import uniform_py


def rand_patch(gen, h, w):
    return gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_noise_free_oracle_reproduces_truth():
    gen = np.random.default_rng(0)
    truth = gen.integers(0, 3, size=(12, 9)).astype(np.uint8)
    s = threshold_oracle_predict(rand_patch(gen, 12, 9), truth, classes=3)
    assert np.array_equal(argmax_labels(s), truth)
    assert set(np.unique(s)) == {-MARGIN, MARGIN}


def test_all_background_window():
    s = threshold_oracle_predict(np.zeros((5, 5, 3), np.uint8), np.zeros((5, 5), np.uint8))
    assert (argmax_labels(s) == 0).all()


def test_noise_below_margin_keeps_truth_exhaustive():
    # worst case: true class drops by noise, a rival rises by noise; gap 2*MARGIN - 2*noise
    noise = 3.9
    assert 2 * MARGIN - 2 * noise > 0
    gen = np.random.default_rng(1)
    for bits in itertools.product([0, 1], repeat=6):
        truth = np.array(bits, dtype=np.uint8).reshape(2, 3)
        patch = rand_patch(gen, 2, 3)
        for seed in range(25):
            s = threshold_oracle_predict(patch, truth, noise=noise, seed=seed)
            assert np.array_equal(argmax_labels(s), truth)
            assert np.abs(s - np.where(s > 0, MARGIN, -MARGIN)).max() <= noise + 1e-6


def test_noise_depends_on_seed_and_bytes():
    gen = np.random.default_rng(2)
    patch, truth = rand_patch(gen, 8, 8), np.zeros((8, 8), np.uint8)
    a = threshold_oracle_predict(patch, truth, noise=1.0, seed=1)
    assert np.array_equal(a, threshold_oracle_predict(patch.copy(), truth, noise=1.0, seed=1))
    assert not np.array_equal(a, threshold_oracle_predict(patch, truth, noise=1.0, seed=2))


def test_shape_and_label_checks():
    with pytest.raises(Exception):
        threshold_oracle_predict(np.zeros((4, 4, 3), np.uint8), np.zeros((5, 4), np.uint8))
    with pytest.raises(Exception):
        threshold_oracle_predict(np.zeros((4, 4, 3), np.uint8), np.full((4, 4), 2, np.uint8), classes=2)


def test_border_degraded_trivial_cases():
    gen = np.random.default_rng(3)
    patch = rand_patch(gen, 16, 16)
    truth = gen.integers(0, 2, size=(16, 16)).astype(np.uint8)
    base = threshold_oracle_predict(patch, truth)
    assert np.array_equal(border_degraded_predict(patch, truth, 0.0, 0.8, seed=1), base)
    assert np.array_equal(border_degraded_predict(patch, truth, 0.25, 0.0, seed=1), base)


@pytest.mark.parametrize("frac,prob", [(-0.1, 0.5), (0.6, 0.5), (0.1, 1.5), (0.1, -0.2)])
def test_border_degraded_parameter_ranges(frac, prob):
    with pytest.raises(ValueError):
        border_degraded_predict(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4), np.uint8), frac, prob, 0)


def test_border_zone_shape():
    z = border_zone(16, 16, 0.125)
    assert z[:2].all() and z[-2:].all() and z[:, :2].all() and z[:, -2:].all()
    assert not z[2:14, 2:14].any()
    assert not border_zone(16, 16, 0.0).any()


def reference_border_degraded(truth, border_frac, flip_prob, seed, tx, ty, d=1.0):
    """Pixel loop over the documented stream: keys (seed, FLIP_STREAM, tile x, tile y, row, col)."""
    h, w = truth.shape
    by, bx = int(border_frac * h), int(border_frac * w)
    out = np.where(np.arange(2)[:, None, None] == truth[None], MARGIN, -MARGIN).astype(np.float32)
    for r in range(h):
        for q in range(w):
            border = r < by or r >= h - by or q < bx or q >= w - bx
            if border and truth[r, q] != 0 and uniform_py(seed, FLIP_STREAM, tx, ty, r, q) < flip_prob:
                out[0, r, q], out[1, r, q] = d, -d
    return out


def test_border_degraded_matches_reference_stream():
    slide = SyntheticSlide(SynthSlideSpec(RasterExtent(256, 256), 8, (20, 40), seed=11))
    truth_all = slide.truth.read_labels()
    pred = BorderDegradedPredictor(truth=slide.truth, border_frac=0.125, flip_prob=0.8, seed=7)
    checked_flips = 0
    for tx, ty in ((0, 0), (64, 64), (96, 32)):
        tile = TileSpec(y=ty, x=tx, size=64)
        patch = slide.image.read_window(tx, ty, 64, 64)
        got = pred.predict(patch, tile)
        ref = reference_border_degraded(truth_all[ty:ty + 64, tx:tx + 64], 0.125, 0.8, 7, tx, ty)
        assert np.array_equal(got, ref)
        checked_flips += int((argmax_labels(got) != truth_all[ty:ty + 64, tx:tx + 64]).sum())
    assert checked_flips > 0


def test_same_pixel_degrades_differently_at_other_offsets():
    truth = np.ones((32, 32), np.uint8)
    patch = np.zeros((32, 32, 3), np.uint8)
    a = border_degraded_predict(patch, truth, 0.25, 0.5, 3, tile_x=0, tile_y=0)
    b = border_degraded_predict(patch, truth, 0.25, 0.5, 3, tile_x=16, tile_y=0)
    assert np.array_equal(a, border_degraded_predict(patch, truth, 0.25, 0.5, 3, tile_x=0, tile_y=0))
    assert not np.array_equal(a, b)


def test_flip_rate_is_close_to_flip_prob():
    truth = np.ones((200, 200), np.uint8)
    s = border_degraded_predict(np.zeros((200, 200, 3), np.uint8), truth, 0.25, 0.8, 5)
    zone = border_zone(200, 200, 0.25)
    flipped = argmax_labels(s) == 0
    assert not flipped[~zone].any()
    assert abs(flipped[zone].mean() - 0.8) < 0.01


@given(st.integers(0, 2**32), st.floats(0, 0.5), st.floats(0, 1))
def test_builtin_predictors_are_pure(seed, frac, prob):
    gen = np.random.default_rng(seed)
    patch = rand_patch(gen, 12, 12)
    pred = BorderDegradedPredictor(border_frac=frac, flip_prob=prob, seed=seed, noise=0.5)
    tile = TileSpec(y=24, x=12, size=12)
    assert np.array_equal(pred.predict(patch, tile), pred.predict(patch.copy(), tile))


def test_intensity_truth_and_predictor_without_raster():
    patch = np.array([[[200, 190, 210], [100, 60, 110]]], np.uint8)
    assert intensity_truth(patch).tolist() == [[0, 1]]
    s = ThresholdOraclePredictor().predict(patch)
    assert argmax_labels(s).tolist() == [[0, 1]]


def test_raster_truth_needs_tile():
    pred = ThresholdOraclePredictor(truth=SyntheticSlide(SynthSlideSpec(RasterExtent(8, 8), 0, (1, 2), 0)).truth)
    with pytest.raises(ValueError):
        pred.predict(np.zeros((8, 8, 3), np.uint8))


def test_constant_predictor():
    s = ConstantPredictor([0.0, 0.0]).predict(np.zeros((3, 4, 3), np.uint8))
    assert s.shape == (2, 3, 4) and not s.any()
    with pytest.raises(ValueError):
        ConstantPredictor([1.0])
