import math
from dataclasses import replace

import numpy as np
import pytest

from glomstitch.errors import InfeasibleSpec
from glomstitch.predictor.builtin import intensity_truth
from glomstitch.synthbench import (PRESETS, ExperimentConfig, SynthSlideSpec, SyntheticSlide, config_from_mapping,
                                   generate_slide, place_objects, rasterize, run_experiment, slide_series)
from glomstitch.tiler import RasterExtent


def spec(w=128, h=96, n=5, radii=(8, 20), seed=1, **kw):
    return SynthSlideSpec(RasterExtent(w, h), n, radii, seed, **kw)


def test_no_objects_all_background():
    image, truth = generate_slide(spec(n=0))
    assert not truth.any()
    assert image.shape == (96, 128, 3)


@pytest.mark.parametrize("r", [20, 33, 57])
def test_circle_area_close_to_formula(r):
    obj = np.array([[r + 5, r + 5, r, r]])
    area = rasterize(obj, 0, 0, 2 * r + 11, 2 * r + 11).sum()
    assert abs(area - math.pi * r * r) / (math.pi * r * r) < 0.02


def test_same_seed_bit_identical():
    a = generate_slide(spec(seed=4))
    b = generate_slide(spec(seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = generate_slide(spec(seed=5))
    assert not np.array_equal(a[1], c[1])


def test_objects_fit_inside_slide():
    objs = place_objects(spec(w=200, h=150, n=50, radii=(5, 40), seed=9))
    cx, cy, rx, ry = objs.T
    assert (cx - rx >= 0).all() and (cx + rx < 200).all()
    assert (cy - ry >= 0).all() and (cy + ry < 150).all()
    assert (rx >= 5).all() and (rx <= 40).all()


def test_infeasible_specs():
    with pytest.raises(InfeasibleSpec):
        place_objects(spec(w=20, h=20, radii=(15, 20)))
    with pytest.raises(InfeasibleSpec):
        place_objects(spec(radii=(0, 3)))


def test_windowed_reads_match_full_render():
    slide = SyntheticSlide(spec(w=150, h=110, n=10, seed=3))
    full_img, full_truth = slide.image.read_all(), slide.truth.read_labels()
    gen = np.random.default_rng(0)
    for _ in range(20):
        x, y = int(gen.integers(0, 150)), int(gen.integers(0, 110))
        w, h = int(gen.integers(1, 150 - x + 1)), int(gen.integers(1, 110 - y + 1))
        assert np.array_equal(slide.image.read_window(x, y, w, h), full_img[y:y + h, x:x + w])
        assert np.array_equal(slide.truth.read_labels(x, y, w, h), full_truth[y:y + h, x:x + w])


def test_rendered_image_encodes_truth_by_intensity():
    image, truth = generate_slide(spec(w=256, h=256, n=12, radii=(10, 40), seed=8))
    assert np.array_equal(intensity_truth(image), truth)


def test_straddle_fraction():
    s = SyntheticSlide(spec(w=512, h=512, n=40, radii=(20, 60), seed=2))
    f = s.straddle_fraction(128)
    assert 0 < f <= 1


def small_config(**kw):
    base = ExperimentConfig(slide_specs=slide_series(3, 256, 256, 6, (16, 40), seed=50), tile_size=64,
                            border_frac=0.125, flip_prob=0.8, predictor_seed=1)
    return replace(base, **kw)


def test_flip_prob_zero_both_arms_perfect():
    result = run_experiment(small_config(flip_prob=0.0))
    for o in result.outcomes:
        assert o.control.dice.value == 1.0 and o.stitched.dice.value == 1.0
    assert result.mean_delta == 0.0


def test_smoke_preset_group_deltas_non_negative(tmp_path):
    result = run_experiment(PRESETS["smoke"], out_dir=tmp_path)
    assert all(d >= 0 for d in result.deltas.group_deltas.values())
    assert result.mean_delta > 0
    assert (tmp_path / "control.json").exists() and (tmp_path / "deltas.txt").exists()
    assert result.summary()["max_contributors"] == 4


def test_experiment_worker_independent():
    a = run_experiment(small_config(), workers=1)
    b = run_experiment(small_config(), workers=3)
    assert a.deltas.to_dict() == b.deltas.to_dict()


def test_overlays_written(tmp_path):
    run_experiment(small_config(slide_specs=slide_series(1, 128, 128, 3, (10, 20), seed=1)),
                   out_dir=tmp_path, overlays=True)
    assert list(tmp_path.glob("*overlay*.png"))


def test_config_from_mapping():
    cfg = config_from_mapping({"tile_size": 128, "predictor": {"flip_prob": 0.5, "seed": 3},
                               "slides": {"count": 2, "width": 300, "height": 200, "object_count": 4,
                                          "radius_min": 10, "radius_max": 20, "seed": 9}})
    assert cfg.tile_size == 128 and cfg.stride_overlap == 64 and cfg.stride_control == 128
    assert cfg.flip_prob == 0.5 and cfg.predictor_seed == 3
    assert len(cfg.slide_specs) == 2 and cfg.slide_specs[0].extent == RasterExtent(300, 200)
    cfg = config_from_mapping({"slide": [{"width": 64, "height": 64, "object_count": 1, "radius_min": 5,
                                          "radius_max": 6, "seed": 1, "id": "one"}]})
    assert cfg.slide_specs[0].name == "one"
    assert PRESETS["paper-desk"].stride_overlap == 256


def test_stride_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(slide_specs=(), tile_size=64, stride_overlap=65)
