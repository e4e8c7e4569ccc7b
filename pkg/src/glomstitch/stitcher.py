"""Overlap-summed stitching of per-tile score maps.

Raw scores of overlapping tiles are summed, the summed map is softmaxed per
pixel and argmaxed into labels. Over a whole slide this runs as a rolling
band: only rows that a future tile can still touch are held in memory, and
rows behind the feed front are finalized and streamed to a sink.
"""

from __future__ import annotations

import collections
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import MissingTarget, MixedSlide, OutOfBand, OutOfExtent, ShapeMismatch, TileFailure
from .io import ArrayMaskSink
from .scoremap import SCORE_DTYPE, argmax_labels, check_scores, softmax_normalize
from .tiler import PatchRecord, RasterExtent, TileGrid, TileSpec

log = logging.getLogger(__name__)


class RowSink(Protocol):
    def accept_rows(self, row_start: int, rows: np.ndarray) -> None: ...

    def finish(self) -> None: ...


@dataclass
class StitchReport:
    tiles_applied: int = 0
    pixels_finalized: int = 0
    max_contributors_seen: int = 0
    peak_band_bytes: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def band_memory_bound(classes: int, tile_size: int, stride: int, width: int) -> int:
    """Upper bound in bytes on the accumulation band for one slide."""
    return classes * (2 * tile_size + stride) * width * np.dtype(SCORE_DTYPE).itemsize


class StitchAccumulator:
    """Rolling-band running sum of tile scores over a raster.

    Tiles must arrive in non-decreasing row order relative to the band: a
    tile may not touch rows that were already finalized by :meth:`advance`.
    Finalized rows go to ``sink`` as labels, to ``prob_sink`` as float32
    probabilities and to ``score_sink`` as the raw float32 sums.
    """

    def __init__(self, extent: RasterExtent, classes: int, tile_size: int, sink: RowSink | None = None,
                 prob_sink: RowSink | None = None, band_height: int | None = None,
                 finalize_chunk: int = 256, score_sink: RowSink | None = None):
        if classes < 2:
            raise ValueError("need at least two classes")
        if band_height is None:
            band_height = 2 * tile_size
        # a band never needs to be taller than the raster
        band_height = min(band_height, extent.height)
        if band_height < min(tile_size, extent.height):
            raise ValueError(f"band height {band_height} cannot hold a {tile_size}-row tile")
        self.extent = extent
        self.classes = classes
        self.tile_size = tile_size
        self.sink = sink
        self.prob_sink = prob_sink
        self.score_sink = score_sink
        self.finalize_chunk = max(1, finalize_chunk)
        self.band = np.zeros((classes, band_height, extent.width), dtype=SCORE_DTYPE)
        self.band_origin_row = 0
        self.report = StitchReport(peak_band_bytes=self.band.nbytes)
        # clipped (y0, y1, x0, x1) rects still overlapping unfinalized rows
        self._live: list[tuple[int, int, int, int]] = []

    @property
    def band_height(self) -> int:
        return self.band.shape[1]

    @property
    def finalized_rows(self) -> int:
        return self.band_origin_row

    def accumulate(self, tile: TileSpec, scores: np.ndarray, crop: bool = False) -> "StitchAccumulator":
        """Add ``scores`` into the band at the tile's offset.

        With ``crop=True`` a tile overhanging the raster edge is clipped to the
        extent (the small-raster case); otherwise overhang is an error.
        """
        scores = check_scores(scores, self.classes, tile.size, tile.size)
        W, H = self.extent.width, self.extent.height
        x1, y1 = tile.x_end, tile.y_end
        if x1 > W or y1 > H:
            if not crop or tile.x >= W or tile.y >= H:
                raise OutOfExtent(f"{tile} exceeds raster extent {W}x{H}")
            x1, y1 = min(x1, W), min(y1, H)
        if tile.y < self.band_origin_row:
            raise OutOfBand(f"{tile} starts above finalized row {self.band_origin_row}")
        if y1 > self.band_origin_row + self.band_height:
            raise OutOfBand(f"{tile} ends below band [{self.band_origin_row}, "
                            f"{self.band_origin_row + self.band_height}); advance first")
        r0 = tile.y - self.band_origin_row
        h, w = y1 - tile.y, x1 - tile.x
        self.band[:, r0:r0 + h, tile.x:x1] += scores[:, :h, :w]
        self._live.append((tile.y, y1, tile.x, x1))
        self.report.tiles_applied += 1
        return self

    def advance(self, safe_row: int) -> int:
        """Finalize and emit rows ``[band_origin_row, safe_row)``; returns rows emitted."""
        safe_row = min(safe_row, self.extent.height)
        emitted = 0
        while self.band_origin_row < safe_row:
            k = min(safe_row - self.band_origin_row, self.band_height)
            self._count_contributors(self.band_origin_row, self.band_origin_row + k)
            for c0 in range(0, k, self.finalize_chunk):
                c1 = min(k, c0 + self.finalize_chunk)
                self._emit(self.band_origin_row + c0, self.band[:, c0:c1])
            self._shift(k)
            self.band_origin_row += k
            self.report.pixels_finalized += k * self.extent.width
            emitted += k
        self._live = [r for r in self._live if r[1] > self.band_origin_row]
        return emitted

    def _shift(self, k: int) -> None:
        # copy in k-row slabs so source and destination never overlap (no temporaries)
        keep = self.band_height - k
        for i in range(0, keep, k):
            n = min(k, keep - i)
            self.band[:, i:i + n] = self.band[:, i + k:i + k + n]
        self.band[:, keep:] = 0

    def finish(self) -> StitchReport:
        self.advance(self.extent.height)
        for sink in (self.sink, self.prob_sink, self.score_sink):
            if sink is not None:
                sink.finish()
        assert self.report.pixels_finalized == self.extent.area
        return self.report

    def _emit(self, row_start: int, sums: np.ndarray) -> None:
        if self.score_sink is not None:
            self.score_sink.accept_rows(row_start, sums.copy())
        probs = softmax_normalize(sums)
        if self.sink is not None:
            self.sink.accept_rows(row_start, argmax_labels(probs))
        if self.prob_sink is not None:
            self.prob_sink.accept_rows(row_start, probs.astype(np.float32))

    def _count_contributors(self, row0: int, row1: int) -> None:
        rects = [(max(a, row0), min(b, row1), c, d) for a, b, c, d in self._live if a < row1 and b > row0]
        if not rects:
            return
        arr = np.array(rects)
        ys = np.unique(arr[:, :2])
        xs = np.unique(arr[:, 2:])
        diff = np.zeros((len(ys) + 1, len(xs) + 1), dtype=np.int32)
        iy0, iy1 = np.searchsorted(ys, arr[:, 0]), np.searchsorted(ys, arr[:, 1])
        ix0, ix1 = np.searchsorted(xs, arr[:, 2]), np.searchsorted(xs, arr[:, 3])
        np.add.at(diff, (iy0, ix0), 1)
        np.add.at(diff, (iy0, ix1), -1)
        np.add.at(diff, (iy1, ix0), -1)
        np.add.at(diff, (iy1, ix1), 1)
        peak = int(diff.cumsum(axis=0).cumsum(axis=1).max())
        self.report.max_contributors_seen = max(self.report.max_contributors_seen, peak)


def _predict_tile(predictor, source, tile: TileSpec) -> np.ndarray:
    try:
        patch = source.read_window(tile.x, tile.y, tile.size, tile.size)
        return predictor.predict(patch, tile)
    except Exception as exc:
        raise TileFailure(tile, exc) from exc


def stitch_full(grid: TileGrid, predictor, source, sink: RowSink | None = None,
                prob_sink: RowSink | None = None, workers: int = 1,
                max_in_flight: int | None = None, score_sink: RowSink | None = None) -> tuple[np.ndarray | None, StitchReport]:
    """Predict every tile of ``grid`` over ``source`` and stitch the result.

    Predictions may run on ``workers`` threads, but scores are accumulated in
    grid order, so the output does not depend on the worker count. Returns the
    label mask (``None`` when rows were streamed to a caller-supplied ``sink``)
    and the stitch report.
    """
    if source.extent != grid.extent:
        raise ShapeMismatch(f"grid extent {grid.extent} does not match source extent {source.extent}")
    own_sink = ArrayMaskSink(grid.extent) if sink is None else None
    acc = StitchAccumulator(grid.extent, predictor.classes, grid.tile_size,
                            sink=own_sink or sink, prob_sink=prob_sink, score_sink=score_sink)

    def consume(tile: TileSpec, scores: np.ndarray) -> None:
        if tile.y > acc.band_origin_row:
            acc.advance(tile.y)
        try:
            acc.accumulate(tile, scores, crop=True)
        except (ShapeMismatch, ValueError) as exc:
            raise TileFailure(tile, exc) from exc

    if workers <= 1:
        for tile in grid:
            consume(tile, _predict_tile(predictor, source, tile))
    else:
        limit = max_in_flight or 2 * workers
        pending: collections.deque = collections.deque()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            try:
                for tile in grid:
                    pending.append((tile, pool.submit(_predict_tile, predictor, source, tile)))
                    if len(pending) >= limit:
                        t, fut = pending.popleft()
                        consume(t, fut.result())
                while pending:
                    t, fut = pending.popleft()
                    consume(t, fut.result())
            finally:
                for _, fut in pending:
                    fut.cancel()
    report = acc.finish()
    log.debug("stitched %d tiles over %dx%d", report.tiles_applied, grid.extent.width, grid.extent.height)
    return (own_sink.mask if own_sink is not None else None), report


# ---------------------------------------------------------------------------
# patch-level reassembly


def _overlap(a: PatchRecord, b: PatchRecord) -> bool:
    return a.x < b.x + b.size and b.x < a.x + a.size and a.y < b.y + b.size and b.y < a.y + a.size


def _target_sums(patches: Sequence[tuple[PatchRecord, np.ndarray]], target: PatchRecord) -> np.ndarray:
    classes = patches[0][1].shape[0]
    sums = np.zeros((classes, target.size, target.size), dtype=SCORE_DTYPE)
    for rec, scores in patches:
        if not _overlap(rec, target):
            continue
        x0, y0 = max(rec.x, target.x), max(rec.y, target.y)
        x1 = min(rec.x + rec.size, target.x + target.size)
        y1 = min(rec.y + rec.size, target.y + target.size)
        sums[:, y0 - target.y:y1 - target.y, x0 - target.x:x1 - target.x] += \
            scores[:, y0 - rec.y:y1 - rec.y, x0 - rec.x:x1 - rec.x]
    return sums


def _check_patches(patches: Sequence[tuple[PatchRecord, np.ndarray]]) -> None:
    if not patches:
        raise ValueError("no patches supplied")
    wsi = patches[0][0].wsi_id
    classes = None
    for rec, scores in patches:
        if rec.wsi_id != wsi:
            raise MixedSlide(f"patches from {wsi!r} and {rec.wsi_id!r} cannot be stitched together")
        check_scores(scores, classes, rec.size, rec.size)
        classes = scores.shape[0]


def reassemble_patches(patches: Sequence[tuple[PatchRecord, np.ndarray]], target: PatchRecord) -> np.ndarray:
    """Stitch patch scores in slide coordinates and crop the target window back out.

    Only patches overlapping the target contribute to its window, so the sum
    is formed directly in the target frame, in input order.
    """
    _check_patches(patches)
    if not any(rec == target for rec, _ in patches):
        raise MissingTarget(f"target {target} is not among the supplied patches")
    if target.wsi_id != patches[0][0].wsi_id:
        raise MixedSlide(f"target belongs to {target.wsi_id!r}")
    return argmax_labels(softmax_normalize(_target_sums(patches, target)))


def reassemble_all(patches: Sequence[tuple[PatchRecord, np.ndarray]]) -> list[tuple[PatchRecord, np.ndarray]]:
    """Reassemble every patch of one or more slides; output follows input order."""
    by_slide: dict[str, list[tuple[PatchRecord, np.ndarray]]] = collections.defaultdict(list)
    for rec, scores in patches:
        by_slide[rec.wsi_id].append((rec, scores))
    for group in by_slide.values():
        _check_patches(group)
    out = []
    for rec, _ in patches:
        group = by_slide[rec.wsi_id]
        out.append((rec, argmax_labels(softmax_normalize(_target_sums(group, rec)))))
    return out
