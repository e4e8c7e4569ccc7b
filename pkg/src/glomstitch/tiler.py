"""Sliding-window tile grids and coordinate-bearing patch filenames."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .errors import MalformedCoordinate, UnrecognizedConvention


@dataclass(frozen=True)
class RasterExtent:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"raster extent must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True, order=True)
class TileSpec:
    # field order gives row-major sorting by (y, x)
    y: int
    x: int
    size: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.size < 1:
            raise ValueError(f"invalid tile {self}")

    @property
    def x_end(self) -> int:
        return self.x + self.size

    @property
    def y_end(self) -> int:
        return self.y + self.size


@dataclass(frozen=True)
class TileGrid:
    extent: RasterExtent
    tile_size: int
    stride: int
    tiles: tuple[TileSpec, ...]

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self) -> Iterator[TileSpec]:
        return iter(self.tiles)

    @property
    def x_origins(self) -> list[int]:
        return sorted({t.x for t in self.tiles})

    @property
    def y_origins(self) -> list[int]:
        return sorted({t.y for t in self.tiles})

    def rows(self) -> Iterator[tuple[int, list[TileSpec]]]:
        """Yield ``(y, tiles)`` for each grid row, top to bottom."""
        current: list[TileSpec] = []
        for tile in self.tiles:
            if current and tile.y != current[0].y:
                yield current[0].y, current
                current = []
            current.append(tile)
        if current:
            yield current[0].y, current


def axis_origins(dim: int, tile_size: int, stride: int) -> list[int]:
    """Window origins along one axis, last one clamped so the window abuts the edge."""
    last = max(0, dim - tile_size)
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def make_grid(extent: RasterExtent, tile_size: int, stride: int) -> TileGrid:
    """Row-major grid of ``tile_size`` windows spaced ``stride`` apart.

    A raster smaller than ``tile_size`` along an axis gets a single origin 0
    on that axis; the tile then overhangs the raster and readers mirror-pad.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    if stride < 1 or stride > tile_size:
        raise ValueError(f"stride must be in [1, tile_size={tile_size}], got {stride}")
    xs = axis_origins(extent.width, tile_size, stride)
    ys = axis_origins(extent.height, tile_size, stride)
    tiles = tuple(TileSpec(x=x, y=y, size=tile_size) for y in ys for x in xs)
    return TileGrid(extent=extent, tile_size=tile_size, stride=stride, tiles=tiles)


# ---------------------------------------------------------------------------
# patch filename codecs


@dataclass(frozen=True)
class PatchRecord:
    wsi_id: str
    x: int
    y: int
    size: int
    payload_path: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.wsi_id or "/" in self.wsi_id or os.sep in self.wsi_id:
            raise ValueError(f"invalid wsi_id {self.wsi_id!r}")
        if self.x < 0 or self.y < 0 or self.size < 1:
            raise ValueError(f"invalid patch geometry x={self.x} y={self.y} size={self.size}")

    @property
    def tile(self) -> TileSpec:
        return TileSpec(x=self.x, y=self.y, size=self.size)


@dataclass(frozen=True)
class FilenameCodec:
    """A named filename grammar.

    ``pattern`` must define the groups ``wsi``, ``x`` and ``y``, and may define
    ``s``; codecs without a size field fall back to ``default_size``.
    """

    codec_id: str
    pattern: re.Pattern
    formatter: Callable[[PatchRecord], str]
    default_size: int | None = None

    def parse(self, name: str) -> PatchRecord:
        base = os.path.basename(name)
        m = self.pattern.fullmatch(base)
        if m is None:
            raise UnrecognizedConvention(f"{base!r} does not match codec {self.codec_id!r}")
        groups = m.groupdict()
        size_text = groups.get("s")
        if size_text is None:
            if self.default_size is None:
                raise MalformedCoordinate(f"{base!r}: codec {self.codec_id!r} carries no size")
            size_text = str(self.default_size)
        x, y, size = (_coordinate(base, label, text) for label, text in
                      (("x", groups["x"]), ("y", groups["y"]), ("s", size_text)))
        if size < 1:
            raise MalformedCoordinate(f"{base!r}: size must be positive")
        return PatchRecord(wsi_id=groups["wsi"], x=x, y=y, size=size, payload_path=name)

    def format(self, record: PatchRecord) -> str:
        return self.formatter(record)


def _coordinate(name: str, label: str, text: str) -> int:
    if not re.fullmatch(r"\d+", text):
        raise MalformedCoordinate(f"{name!r}: field {label}={text!r} is not a non-negative integer")
    return int(text)


_EXT = r"(?:\.(?P<ext>[A-Za-z0-9]+))?"
_NUM = r"[^_./]*"

CODECS: dict[str, FilenameCodec] = {}


def register_codec(codec: FilenameCodec) -> None:
    CODECS[codec.codec_id] = codec


register_codec(FilenameCodec(
    codec_id="canonical",
    pattern=re.compile(rf"(?P<wsi>.+)__x(?P<x>{_NUM})_y(?P<y>{_NUM})_s(?P<s>{_NUM}){_EXT}"),
    formatter=lambda r: f"{r.wsi_id}__x{r.x}_y{r.y}_s{r.size}",
))
# <wsi_id>_<X>_<Y>_(img|mask).<ext>, 2048 px patches
register_codec(FilenameCodec(
    codec_id="kpis",
    pattern=re.compile(rf"(?P<wsi>.+?)_(?P<x>{_NUM})_(?P<y>{_NUM})_(?:img|mask){_EXT}"),
    formatter=lambda r: f"{r.wsi_id}_{r.x}_{r.y}_img",
    default_size=2048,
))
# <wsi_id>_x<X>_y<Y>[_mask].<ext>, 1024 px patches
register_codec(FilenameCodec(
    codec_id="mice",
    pattern=re.compile(rf"(?P<wsi>.+?)_x(?P<x>{_NUM})_y(?P<y>{_NUM})(?:_mask)?{_EXT}"),
    formatter=lambda r: f"{r.wsi_id}_x{r.x}_y{r.y}",
    default_size=1024,
))


def parse_patch_filename(name: str, convention: str | None = "canonical") -> PatchRecord:
    """Decode a patch filename; ``convention=None`` tries every registered codec."""
    if convention is not None:
        try:
            codec = CODECS[convention]
        except KeyError:
            raise UnrecognizedConvention(f"no codec registered as {convention!r}") from None
        return codec.parse(name)
    for codec in CODECS.values():
        try:
            return codec.parse(name)
        except UnrecognizedConvention:
            continue
    raise UnrecognizedConvention(f"{os.path.basename(name)!r} matches no registered codec")


def format_patch_filename(record: PatchRecord, convention: str = "canonical", ext: str | None = None) -> str:
    try:
        codec = CODECS[convention]
    except KeyError:
        raise UnrecognizedConvention(f"no codec registered as {convention!r}") from None
    name = codec.format(record)
    return f"{name}.{ext}" if ext else name
