"""Annotated patch extraction from slide rasters and group-wise dataset splits."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, ShapeMismatch, UnknownSlide
from .io import RasterReader, open_raster, raster_extent, write_image, write_mask
from .tiler import CODECS, PatchRecord, RasterExtent, format_patch_filename, make_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    wsi_id: str
    group: str
    image: object  # path or RasterReader
    truth: object
    extent: RasterExtent | None = None
    exclude_wsi_eval: bool = False

    def open_image(self) -> RasterReader:
        return self.image if isinstance(self.image, RasterReader) else open_raster(self.image)

    def open_truth(self) -> RasterReader:
        return self.truth if isinstance(self.truth, RasterReader) else open_raster(self.truth)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    patch_size: int = 1024
    convention: str = "canonical"

    def __post_init__(self):
        ids = [e.wsi_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest wsi_ids must be unique")
        if self.convention not in CODECS:
            raise ConfigError(f"unknown filename convention {self.convention!r}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")

    def entry(self, wsi_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.wsi_id == wsi_id:
                return e
        raise UnknownSlide(wsi_id)

    @property
    def groups(self) -> dict[str, str]:
        return {e.wsi_id: e.group for e in self.entries}

    def wsi_eval_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not e.exclude_wsi_eval]


def load_manifest(path, check_extents: bool = True) -> DatasetManifest:
    """Read a TOML manifest; relative paths resolve against ``root`` or the file's directory."""
    path = Path(path)
    data = load_config(path)
    root = (path.parent / data.get("root", ".")).resolve()
    entries = []
    for raw in data.get("slide", []):
        try:
            image, truth = root / raw["image"], root / raw["truth"]
            entry = ManifestEntry(wsi_id=str(raw["wsi_id"]), group=str(raw.get("group", "default")),
                                  image=image, truth=truth,
                                  exclude_wsi_eval=bool(raw.get("exclude_wsi_eval", False)))
        except KeyError as exc:
            raise ConfigError(f"{path}: slide entry missing {exc}") from None
        if check_extents:
            extent = raster_extent(image)
            if raster_extent(truth) != extent:
                raise ShapeMismatch(f"{entry.wsi_id}: truth extent differs from image extent {extent}")
            entry = ManifestEntry(entry.wsi_id, entry.group, image, truth, extent, entry.exclude_wsi_eval)
        entries.append(entry)
    return DatasetManifest(tuple(entries), patch_size=int(data.get("patch_size", 1024)),
                           convention=str(data.get("convention", "canonical")))


@dataclass
class ExtractionResult:
    records: list[PatchRecord] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)


def _extract_slide(entry: ManifestEntry, manifest: DatasetManifest, out_dir: Path, stride: int):
    image = entry.open_image()
    truth = entry.open_truth()
    if truth.extent != image.extent:
        raise ShapeMismatch(f"truth extent {truth.extent} differs from image extent {image.extent}")
    size = manifest.patch_size
    slide_dir = out_dir / entry.wsi_id
    records = []
    for tile in make_grid(image.extent, size, stride):
        labels = truth.read_labels(tile.x, tile.y, size, size)
        if not np.any(labels):
            continue
        record = PatchRecord(wsi_id=entry.wsi_id, x=tile.x, y=tile.y, size=size)
        name = format_patch_filename(record, manifest.convention, ext="png")
        img_path = slide_dir / "images" / name
        img_path.parent.mkdir(parents=True, exist_ok=True)
        (slide_dir / "masks").mkdir(parents=True, exist_ok=True)
        write_image(img_path, image.read_window(tile.x, tile.y, size, size))
        write_mask(slide_dir / "masks" / name, labels)
        records.append(PatchRecord(record.wsi_id, record.x, record.y, record.size, payload_path=str(img_path)))
    return records


def extract_annotated_patches(manifest: DatasetManifest, out_dir, stride: int | None = None,
                              workers: int = 1) -> ExtractionResult:
    """Write every patch whose truth window holds at least one foreground pixel.

    ``stride`` defaults to the patch size (non-overlapping extraction). Each
    slide writes under its own ``out_dir/<wsi_id>/{images,masks}``.
    """
    out_dir = Path(out_dir)
    stride = stride or manifest.patch_size

    def run(entry):
        try:
            return entry.wsi_id, _extract_slide(entry, manifest, out_dir, stride), None
        except Exception as exc:  # per-slide failures are reported, not fatal
            log.warning("skipping %s: %s", entry.wsi_id, exc)
            return entry.wsi_id, [], f"{type(exc).__name__}: {exc}"

    if workers <= 1:
        outcomes = [run(e) for e in manifest.entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, manifest.entries))
    result = ExtractionResult()
    for wsi_id, records, error in outcomes:
        result.records.extend(records)
        if error is not None:
            result.failures[wsi_id] = error
    return result


def split_by_group(records, manifest: DatasetManifest) -> dict[str, list[PatchRecord]]:
    """Partition records by their slide's group, ordered by (slide order in manifest, y, x)."""
    order = {e.wsi_id: i for i, e in enumerate(manifest.entries)}
    groups = manifest.groups
    parts: dict[str, list[PatchRecord]] = {}
    for rec in records:
        if rec.wsi_id not in groups:
            raise UnknownSlide(f"record for {rec.wsi_id!r} has no manifest entry")
        parts.setdefault(groups[rec.wsi_id], []).append(rec)
    for recs in parts.values():
        recs.sort(key=lambda r: (order[r.wsi_id], r.y, r.x, r.size))
    return parts
