import warnings
import zlib
from pathlib import Path

import numpy as np
import pytest
import tifffile
from PIL import Image

from glomstitch.errors import CorruptFile, OutOfExtent, ShapeMismatch, SinkContractError, UnsupportedFormat
from glomstitch.io import (ArrayRaster, PngMaskWriter, ProbPngWriter, TiffRaster, decode_shard, encode_shard,
                           mask_boundary, open_raster, raster_extent, read_mask, read_shard, render_overlay,
                           write_image, write_mask, write_shard)
from glomstitch.tiler import RasterExtent

DATA = Path(__file__).parent / "data"


def full_decode(path):
    return np.asarray(Image.open(path))


def test_png_known_bytes(tmp_path):
    pixels = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    Image.fromarray(pixels).save(tmp_path / "k.png")
    r = open_raster(tmp_path / "k.png")
    assert r.read_window(0, 0, 4, 4).tobytes() == bytes(range(48))
    assert r.extent == RasterExtent(4, 4) == raster_extent(tmp_path / "k.png")


def test_window_outside_is_error_partial_is_mirrored():
    r = ArrayRaster(np.arange(16, dtype=np.uint8).reshape(4, 4))
    with pytest.raises(OutOfExtent):
        r.read_window(4, 0, 2, 2)
    with pytest.raises(OutOfExtent):
        r.read_window(-3, 0, 3, 2)
    block = r.read_window(2, 2, 4, 4)[..., 0]
    assert block.tolist() == [[10, 11, 11, 10], [14, 15, 15, 14], [14, 15, 15, 14], [10, 11, 11, 10]]
    with pytest.raises(ValueError):
        r.read_window(0, 0, 0, 1)


@pytest.mark.parametrize("kind", ["tiled", "striped", "tiled-zlib", "striped-zlib", "gray-tiled", "png",
                                  "pil-lzw"])
@pytest.mark.parametrize("seed", range(3))
def test_random_windows_match_full_decode(tmp_path, kind, seed):
    gen = np.random.default_rng(zlib.crc32(kind.encode()) + seed)
    shape = (203, 157) if kind.startswith("gray") else (203, 157, 3)
    img = gen.integers(0, 256, size=shape, dtype=np.uint8)
    path = tmp_path / ("x.png" if kind == "png" else "x.tif")
    if kind == "png":
        Image.fromarray(img).save(path)
    elif kind == "pil-lzw":
        Image.fromarray(img).save(path, compression="tiff_lzw")
    else:
        compression = "zlib" if kind.endswith("zlib") else None
        opts = {"tile": (32, 48)} if "tiled" in kind else {"rowsperstrip": 7}
        tifffile.imwrite(path, img, compression=compression, **opts)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        reader = open_raster(path)
    if kind not in ("png", "pil-lzw"):
        assert isinstance(reader, TiffRaster)
    fell_back = any("falling back" in str(w.message) for w in caught)
    assert fell_back == (kind == "pil-lzw" and not isinstance(reader, TiffRaster))
    ref = full_decode(path)
    if ref.ndim == 2:
        ref = ref[..., None]
    assert np.array_equal(reader.read_all(), ref)
    for _ in range(40):
        x, y = int(gen.integers(0, 157)), int(gen.integers(0, 203))
        w, h = int(gen.integers(1, 80)), int(gen.integers(1, 80))
        got = reader.read_window(x, y, w, h)
        x1, y1 = min(x + w, 157), min(y + h, 203)
        assert got.shape == (h, w, ref.shape[2])
        assert np.array_equal(got[:y1 - y, :x1 - x], ref[y:y1, x:x1])


def test_tiff_reads_only_needed_segments(tmp_path):
    img = np.zeros((256, 256, 3), np.uint8)
    tifffile.imwrite(tmp_path / "t.tif", img, tile=(64, 64))
    r = open_raster(tmp_path / "t.tif")
    seen = []
    orig = r._segment
    r._segment = lambda i: seen.append(i) or orig(i)
    r.read_window(70, 70, 10, 10)
    assert seen == [5]


def test_unsupported_tiff_falls_back_with_warning(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
    tifffile.imwrite(tmp_path / "p.tif", np.moveaxis(img, 2, 0), photometric="rgb",
                     planarconfig="separate")
    with pytest.warns(ResourceWarning):
        r = open_raster(tmp_path / "p.tif")
    assert np.array_equal(r.read_all(), img)


def test_unsupported_and_corrupt_files(tmp_path):
    (tmp_path / "a.jpg").write_bytes(b"\xff\xd8\xff\xe0junk")
    with pytest.raises(UnsupportedFormat):
        open_raster(tmp_path / "a.jpg")
    (tmp_path / "b.png").write_bytes(b"\x89PNG\r\n\x1a\n" + b"\0" * 20)
    with pytest.raises(CorruptFile):
        open_raster(tmp_path / "b.png")


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(1).integers(0, 4, size=(33, 45)).astype(np.uint8)
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)
    assert np.array_equal(full_decode(tmp_path / "m.png"), m)
    write_mask(tmp_path / "v.png", (m > 0).astype(np.uint8), visual_scale=255)
    assert set(np.unique(read_mask(tmp_path / "v.png"))) <= {0, 255}


def test_sink_contract(tmp_path):
    w = PngMaskWriter(tmp_path / "o.png", RasterExtent(4, 4))
    w.accept_rows(0, np.zeros((2, 4), np.uint8))
    with pytest.raises(SinkContractError):
        w.accept_rows(3, np.zeros((1, 4), np.uint8))
    with pytest.raises(ShapeMismatch):
        w.accept_rows(2, np.zeros((1, 5), np.uint8))
    with pytest.raises(SinkContractError):
        w.finish()
    assert not (tmp_path / "o.png").exists()
    assert not list(tmp_path.iterdir())


def test_streamed_and_whole_writes_byte_identical(tmp_path):
    # incompressible content so the file spans several 1 MiB IDAT chunks
    m = np.random.default_rng(2).integers(0, 256, size=(1500, 1000), dtype=np.uint8)
    write_mask(tmp_path / "whole.png", m)
    w = PngMaskWriter(tmp_path / "rows.png", RasterExtent(1000, 1500))
    for r in range(1500):
        w.accept_rows(r, m[r:r + 1])
    w.finish()
    a, b = (tmp_path / "whole.png").read_bytes(), (tmp_path / "rows.png").read_bytes()
    assert a == b
    assert a.count(b"IDAT") >= 2
    assert np.array_equal(full_decode(tmp_path / "rows.png"), m)


def test_prob_writer(tmp_path):
    probs = np.stack([np.full((2, 3), 0.75), np.full((2, 3), 0.25)])
    w = ProbPngWriter(tmp_path / "p.png", RasterExtent(3, 2))
    w.accept_rows(0, probs)
    w.finish()
    assert (read_mask(tmp_path / "p.png") == 64).all()


def test_shard_round_trip_and_corruption(tmp_path):
    s = np.random.default_rng(3).normal(size=(3, 5, 7)).astype(np.float32)
    write_shard(tmp_path / "s.wssh", s)
    assert np.array_equal(read_shard(tmp_path / "s.wssh"), s)
    blob = bytearray(encode_shard(s))
    blob[20] ^= 1
    with pytest.raises(CorruptFile):
        decode_shard(bytes(blob))
    with pytest.raises(CorruptFile):
        decode_shard(bytes(blob[:-8]))
    with pytest.raises(UnsupportedFormat):
        decode_shard(b"XXXX" + bytes(blob[4:]))


def test_overlay_empty_mask_is_identity():
    img = np.random.default_rng(4).integers(0, 256, size=(10, 12, 3), dtype=np.uint8)
    assert np.array_equal(render_overlay(img, np.zeros((10, 12), np.uint8)), img)


def test_full_foreground_boundary_is_image_border():
    b = mask_boundary(np.ones((6, 7), np.uint8))
    expected = np.ones((6, 7), bool)
    expected[1:-1, 1:-1] = False
    assert np.array_equal(b, expected)


def test_overlay_golden_16():
    yy, xx = np.mgrid[:16, :16]
    image = np.stack([xx * 16, yy * 16, np.full((16, 16), 128)], axis=2).astype(np.uint8)
    mask = np.zeros((16, 16), np.uint8)
    mask[3:11, 4:12] = 1
    truth = (((yy - 8) ** 2 + (xx - 8) ** 2) <= 16).astype(np.uint8)
    out = render_overlay(image, mask, truth)
    assert out.tobytes() == (DATA / "overlay16.rgb").read_bytes()


def test_overlay_fill_and_shape_check():
    img = np.zeros((4, 4), np.uint8)
    mask = np.ones((4, 4), np.uint8)
    out = render_overlay(img, mask, fill_alpha=0.5)
    assert out.shape == (4, 4, 3)
    assert tuple(out[1, 1]) == (128, 128, 0)
    with pytest.raises(ShapeMismatch):
        render_overlay(img, np.ones((3, 4), np.uint8))


def test_write_image_round_trip(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, size=(9, 8, 3), dtype=np.uint8)
    write_image(tmp_path / "i.png", img)
    assert np.array_equal(open_raster(tmp_path / "i.png").read_all(), img)
