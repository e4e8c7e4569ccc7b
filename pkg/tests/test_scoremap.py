import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glomstitch.errors import IndexOutOfRange, NonFiniteInput, ShapeMismatch
from glomstitch.scoremap import argmax_labels, binarize, check_scores, softmax_normalize
from oracles import pixel_argmax


def px(*values):
    return np.array(values, dtype=np.float32).reshape(len(values), 1, 1)


def test_softmax_symmetric():
    assert np.allclose(softmax_normalize(px(0, 0))[:, 0, 0], [0.5, 0.5])


def test_softmax_large_values_no_overflow():
    with np.errstate(all="raise"):
        out = softmax_normalize(px(1000, 1000))
    assert np.array_equal(out[:, 0, 0], [0.5, 0.5])


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    vals = [1, 2, 3]
    denom = mpmath.fsum(mpmath.exp(v) for v in vals)
    expected = [float(mpmath.exp(v) / denom) for v in vals]
    got = softmax_normalize(px(*vals))[:, 0, 0]
    assert np.allclose(got, expected, rtol=0, atol=1e-9)


# logits on a 1/64 lattice: gaps far below float64 resolution would tie after exp
@given(arrays(np.float32, (3, 4, 4), elements=st.integers(-4096, 4096).map(lambda k: k / 64)))
def test_softmax_is_distribution_preserving_order(scores):
    p = softmax_normalize(scores)
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-12)
    assert (p >= 0).all()
    assert np.array_equal(argmax_labels(p), argmax_labels(scores))


def test_argmax_examples():
    assert argmax_labels(px(0.1, 0.9))[0, 0] == 1
    assert argmax_labels(px(0.5, 0.5))[0, 0] == 0
    assert argmax_labels(px(2, 7, 7))[0, 0] == 1


def test_argmax_matches_loop_oracle():
    gen = np.random.default_rng(1)
    # coarse values so ties are common
    scores = gen.integers(0, 4, size=(3, 16, 16)).astype(np.float32)
    labels = argmax_labels(scores)
    for i in range(16):
        for j in range(16):
            assert labels[i, j] == pixel_argmax(list(scores[:, i, j]))
    assert labels.dtype == np.uint8


def test_binarize_cases():
    assert binarize(np.ones((3, 3), np.uint8), 1).all()
    assert not binarize(np.zeros((3, 3), np.uint8), 1).any()
    gen = np.random.default_rng(2)
    m = gen.integers(0, 3, size=(20, 20)).astype(np.uint8)
    b = binarize(m, 2)
    for i in range(20):
        for j in range(20):
            assert b[i, j] == (1 if m[i, j] == 2 else 0)
    with pytest.raises(IndexOutOfRange):
        binarize(m, 3, classes=3)


def test_check_scores_errors():
    with pytest.raises(ShapeMismatch):
        check_scores(np.zeros((1, 2, 2)))
    with pytest.raises(ShapeMismatch):
        check_scores(np.zeros((2, 2, 2)), classes=3)
    with pytest.raises(NonFiniteInput):
        check_scores(np.array([np.nan, 0.0]).reshape(2, 1, 1))
    with pytest.raises(NonFiniteInput):
        softmax_normalize(np.array([np.inf, 0.0]).reshape(2, 1, 1))
