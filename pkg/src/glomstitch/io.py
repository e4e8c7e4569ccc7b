"""Raster readers, streaming mask writers, score shards and overlays.

Readers return 8-bit blocks shaped ``(h, w, channels)``. Windows that hang
over the raster edge are mirror-padded; windows entirely outside it are an
error.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import warnings
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptFile, OutOfExtent, ShapeMismatch, SinkContractError, UnsupportedFormat
from .scoremap import LABEL_DTYPE, SCORE_DTYPE, check_scores
from .tiler import RasterExtent

log = logging.getLogger(__name__)

# full decodes above this size get a memory warning
FULL_DECODE_WARN_PIXELS = 64_000_000

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
TIFF_SIGNATURES = (b"II*\x00", b"MM\x00*", b"II+\x00", b"MM\x00+")


class RasterReader:
    """Windowed reader over an 8-bit raster. Subclasses implement ``_read_region``."""

    extent: RasterExtent
    channels: int

    def _read_region(self, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        raise NotImplementedError

    def read_window(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        if w < 1 or h < 1:
            raise ValueError(f"window size must be positive, got {w}x{h}")
        W, H = self.extent.width, self.extent.height
        x0, y0, x1, y1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
        if x0 >= x1 or y0 >= y1:
            raise OutOfExtent(f"window ({x}, {y}, {w}, {h}) lies outside raster {W}x{H}")
        block = self._read_region(x0, y0, x1, y1)
        pad = ((y0 - y, y + h - y1), (x0 - x, x + w - x1), (0, 0))
        if any(p for pair in pad for p in pair):
            block = np.pad(block, pad, mode="symmetric")
        return block

    def read_labels(self, x: int = 0, y: int = 0, w: int | None = None, h: int | None = None) -> np.ndarray:
        """Read a single-channel window as a 2-D label array."""
        w = self.extent.width - x if w is None else w
        h = self.extent.height - y if h is None else h
        return self.read_window(x, y, w, h)[..., 0]

    def read_all(self) -> np.ndarray:
        return self.read_window(0, 0, self.extent.width, self.extent.height)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ArrayRaster(RasterReader):
    def __init__(self, array: np.ndarray):
        array = np.asarray(array)
        if array.ndim == 2:
            array = array[..., None]
        if array.ndim != 3 or array.dtype != np.uint8:
            raise ShapeMismatch(f"expected (H, W[, C]) uint8 array, got {array.shape} {array.dtype}")
        self.array = array
        self.extent = RasterExtent(width=array.shape[1], height=array.shape[0])
        self.channels = array.shape[2]

    def _read_region(self, x0, y0, x1, y1):
        return self.array[y0:y1, x0:x1]


class _FullDecodeRaster(ArrayRaster):
    def __init__(self, path: Path):
        Image.MAX_IMAGE_PIXELS = None
        try:
            with Image.open(path) as im:
                if im.width * im.height > FULL_DECODE_WARN_PIXELS:
                    warnings.warn(f"{path}: decoding {im.width}x{im.height} raster fully into memory",
                                  ResourceWarning, stacklevel=3)
                if im.mode not in ("L", "RGB", "P"):
                    im = im.convert("RGB")
                elif im.mode == "P":
                    im = im.convert("RGB")
                array = np.asarray(im)
        except (OSError, SyntaxError, ValueError) as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
        super().__init__(np.ascontiguousarray(array, dtype=np.uint8))
        self.path = path


class PngRaster(_FullDecodeRaster):
    """PNG has no random access, so the whole image is decoded once on open."""


class TiffRaster(RasterReader):
    """Baseline striped or tiled TIFF, decoding only the segments a window needs."""

    def __init__(self, path: Path):
        import tifffile

        self.path = path
        try:
            self._tf = tifffile.TiffFile(path)
        except (tifffile.TiffFileError, OSError, ValueError) as exc:
            raise CorruptFile(f"{path}: {exc}") from exc
        page = self._tf.pages.first
        if page.dtype != np.uint8 or page.planarconfig != tifffile.PLANARCONFIG.CONTIG \
                or len(page.shape) not in (2, 3) or getattr(page, "imagedepth", 1) != 1:
            self._tf.close()
            raise UnsupportedFormat(f"{path}: only 8-bit contiguous 2-D TIFF is supported "
                                    f"(got {page.dtype}, shape {page.shape})")
        self._page = page
        self.extent = RasterExtent(width=page.imagewidth, height=page.imagelength)
        self.channels = page.samplesperpixel
        if page.is_tiled:
            self._seg_h, self._seg_w = page.tilelength, page.tilewidth
        else:
            rows = page.rowsperstrip or self.extent.height
            self._seg_h, self._seg_w = min(rows, self.extent.height), self.extent.width
        self._cols = -(-self.extent.width // self._seg_w)
        self._lock = threading.Lock()

    def close(self) -> None:
        self._tf.close()

    def _segment(self, index: int) -> np.ndarray:
        offset = self._page.dataoffsets[index]
        count = self._page.databytecounts[index]
        with self._lock:
            fh = self._tf.filehandle
            fh.seek(offset)
            data = fh.read(count) if count else None
        try:
            seg, _, _ = self._page.decode(data, index, jpegtables=self._page.jpegtables)
        except (ValueError, NotImplementedError, KeyError) as exc:
            # KeyError: codec needs the optional imagecodecs package (LZW, JPEG, ...)
            raise UnsupportedFormat(f"{self.path}: cannot decode segment {index}: {exc}") from exc
        if seg is None:
            seg = np.zeros((1, self._seg_h, self._seg_w, self.channels), dtype=np.uint8)
        return seg.reshape(seg.shape[-3:])

    def _read_region(self, x0, y0, x1, y1):
        out = np.empty((y1 - y0, x1 - x0, self.channels), dtype=np.uint8)
        for r in range(y0 // self._seg_h, (y1 - 1) // self._seg_h + 1):
            for c in range(x0 // self._seg_w, (x1 - 1) // self._seg_w + 1):
                seg = self._segment(r * self._cols + c)
                sy, sx = r * self._seg_h, c * self._seg_w
                ay0, ay1 = max(y0, sy), min(y1, sy + seg.shape[0])
                ax0, ax1 = max(x0, sx), min(x1, sx + seg.shape[1])
                out[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] = seg[ay0 - sy:ay1 - sy, ax0 - sx:ax1 - sx]
        return out


class _FallbackTiff(_FullDecodeRaster):
    pass


def open_raster(path) -> RasterReader:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(PNG_SIGNATURE):
        return PngRaster(path)
    if head[:4] in TIFF_SIGNATURES:
        reader = None
        try:
            reader = TiffRaster(path)
            reader.read_window(0, 0, 1, 1)
            return reader
        except UnsupportedFormat as exc:
            if reader is not None:
                reader.close()
            warnings.warn(f"{exc}; falling back to full decode", ResourceWarning, stacklevel=2)
            return _FallbackTiff(path)
    raise UnsupportedFormat(f"{path}: not a PNG or TIFF file")


def raster_extent(path) -> RasterExtent:
    """Extent from the file header alone, without decoding pixels."""
    Image.MAX_IMAGE_PIXELS = None
    try:
        with Image.open(path) as im:
            return RasterExtent(width=im.width, height=im.height)
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# mask sinks


def _png_chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))


class PngMaskWriter:
    """Streaming single-channel 8-bit PNG writer implementing the mask sink contract.

    Rows must arrive exactly once, top to bottom. The file is written under a
    temporary name and moved into place by :meth:`finish`; on any failure the
    partial file is removed.
    """

    IDAT_SIZE = 1 << 20

    def __init__(self, path, extent: RasterExtent, visual_scale: int = 1, level: int = 6):
        self.path = Path(path)
        self.extent = extent
        self.visual_scale = visual_scale
        self.next_row = 0
        self._tmp = self.path.with_name(self.path.name + ".partial")
        self._fh = open(self._tmp, "wb")
        self._z = zlib.compressobj(level, zlib.DEFLATED, 15, 9, zlib.Z_DEFAULT_STRATEGY)
        self._pending = bytearray()
        try:
            ihdr = struct.pack(">IIBBBBB", extent.width, extent.height, 8, 0, 0, 0, 0)
            self._fh.write(PNG_SIGNATURE + _png_chunk(b"IHDR", ihdr))
        except OSError:
            self.abort()
            raise

    def accept_rows(self, row_start: int, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        if self._fh is None:
            raise SinkContractError("writer already finished or aborted")
        if row_start != self.next_row:
            raise SinkContractError(f"expected row {self.next_row}, got {row_start}")
        if rows.ndim != 2 or rows.shape[1] != self.extent.width:
            raise ShapeMismatch(f"rows of shape {rows.shape} do not match width {self.extent.width}")
        if row_start + rows.shape[0] > self.extent.height:
            raise SinkContractError("rows run past the raster height")
        data = rows.astype(np.uint16) * self.visual_scale if self.visual_scale != 1 else rows
        data = np.asarray(data).astype(np.uint8)
        framed = np.zeros((rows.shape[0], self.extent.width + 1), dtype=np.uint8)
        framed[:, 1:] = data
        try:
            self._pending += self._z.compress(framed.tobytes())
            self._drain(final=False)
        except OSError:
            self.abort()
            raise
        self.next_row += rows.shape[0]

    def _drain(self, final: bool) -> None:
        while len(self._pending) >= self.IDAT_SIZE:
            self._fh.write(_png_chunk(b"IDAT", bytes(self._pending[:self.IDAT_SIZE])))
            del self._pending[:self.IDAT_SIZE]
        if final and self._pending:
            self._fh.write(_png_chunk(b"IDAT", bytes(self._pending)))
            self._pending.clear()

    def finish(self) -> None:
        if self._fh is None:
            raise SinkContractError("writer already finished or aborted")
        if self.next_row != self.extent.height:
            self.abort()
            raise SinkContractError(f"finish after {self.next_row} of {self.extent.height} rows")
        try:
            self._pending += self._z.flush()
            self._drain(final=True)
            self._fh.write(_png_chunk(b"IEND", b""))
            self._fh.close()
            self._fh = None
            os.replace(self._tmp, self.path)
        except OSError:
            self.abort()
            raise

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self._tmp.unlink(missing_ok=True)


class ProbPngWriter:
    """Writes one class's probability, scaled to 0..255, as an 8-bit PNG."""

    def __init__(self, path, extent: RasterExtent, foreground_class: int = 1):
        self.foreground_class = foreground_class
        self._png = PngMaskWriter(path, extent)

    def accept_rows(self, row_start: int, probs: np.ndarray) -> None:
        scaled = np.rint(probs[self.foreground_class] * 255.0).astype(np.uint8)
        self._png.accept_rows(row_start, scaled)

    def finish(self) -> None:
        self._png.finish()

    def abort(self) -> None:
        self._png.abort()


class ArrayMaskSink:
    def __init__(self, extent: RasterExtent):
        self.extent = extent
        self.mask = np.zeros((extent.height, extent.width), dtype=LABEL_DTYPE)
        self.next_row = 0
        self.finished = False

    def accept_rows(self, row_start: int, rows: np.ndarray) -> None:
        if row_start != self.next_row:
            raise SinkContractError(f"expected row {self.next_row}, got {row_start}")
        self.mask[row_start:row_start + rows.shape[0]] = rows
        self.next_row += rows.shape[0]

    def finish(self) -> None:
        if self.next_row != self.extent.height:
            raise SinkContractError(f"finish after {self.next_row} of {self.extent.height} rows")
        self.finished = True


class TeeSink:
    def __init__(self, *sinks):
        self.sinks = sinks

    def accept_rows(self, row_start, rows):
        for s in self.sinks:
            s.accept_rows(row_start, rows)

    def finish(self):
        for s in self.sinks:
            s.finish()


def write_mask(path, mask: np.ndarray, visual_scale: int = 1) -> Path:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got {mask.shape}")
    writer = PngMaskWriter(path, RasterExtent(width=mask.shape[1], height=mask.shape[0]), visual_scale)
    writer.accept_rows(0, mask.astype(np.uint8))
    writer.finish()
    return writer.path


def read_mask(path) -> np.ndarray:
    return open_raster(path).read_labels()


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------------------
# score shards: "WSSH" u16 version, u16 C, u32 H, u32 W, then C*H*W float32, CRC32 trailer

SHARD_MAGIC = b"WSSH"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sHHII")


def encode_shard(scores: np.ndarray) -> bytes:
    scores = check_scores(scores)
    c, h, w = scores.shape
    body = _SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, c, h, w) + \
        np.ascontiguousarray(scores, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_shard(blob: bytes) -> np.ndarray:
    if len(blob) < _SHARD_HEADER.size + 4:
        raise CorruptFile("score shard truncated")
    magic, version, c, h, w = _SHARD_HEADER.unpack_from(blob)
    if magic != SHARD_MAGIC:
        raise UnsupportedFormat(f"bad shard magic {magic!r}")
    if version != SHARD_VERSION:
        raise UnsupportedFormat(f"unsupported shard version {version}")
    expected = _SHARD_HEADER.size + 4 * c * h * w + 4
    if len(blob) != expected:
        raise CorruptFile(f"shard length {len(blob)} != expected {expected}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(blob[:-4]):
        raise CorruptFile("score shard checksum mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=_SHARD_HEADER.size)
    return data.reshape(c, h, w).astype(SCORE_DTYPE)


def write_shard(path, scores: np.ndarray) -> None:
    Path(path).write_bytes(encode_shard(scores))


def read_shard(path) -> np.ndarray:
    return decode_shard(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# overlays

PRED_COLOR = (255, 255, 0)
TRUTH_COLOR = (0, 160, 255)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground.

    Pixels beyond the image border count as background.
    """
    fg = np.pad(np.asarray(mask) > 0, 1, constant_values=False)
    core = fg[1:-1, 1:-1]
    interior = fg[:-2, 1:-1] & fg[2:, 1:-1] & fg[1:-1, :-2] & fg[1:-1, 2:]
    return core & ~interior


def render_overlay(image: np.ndarray, mask: np.ndarray, truth: np.ndarray | None = None,
                   fill_alpha: float = 0.0, pred_color=PRED_COLOR, truth_color=TRUTH_COLOR) -> np.ndarray:
    """Draw prediction (and optional truth) boundaries over an RGB copy of ``image``."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2] or (truth is not None and np.shape(truth) != mask.shape):
        raise ShapeMismatch("image, mask and truth must share height and width")
    out = image[..., :3].copy()
    if fill_alpha > 0:
        fg = mask > 0
        blended = (1.0 - fill_alpha) * out[fg] + fill_alpha * np.asarray(pred_color, dtype=np.float64)
        out[fg] = np.rint(blended).astype(np.uint8)
    if truth is not None:
        out[mask_boundary(truth)] = truth_color
    out[mask_boundary(mask)] = pred_color
    return out
