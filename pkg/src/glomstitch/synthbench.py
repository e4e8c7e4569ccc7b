"""Synthetic slides and the with/without-overlap stitching experiment.

Slides hold axis-aligned ellipses standing in for glomeruli. Both the image
and the truth are rendered on demand from the object list, so a slide of any
size can be read window by window without materializing it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng
from .errors import InfeasibleSpec
from .evaluation import DeltaTable, DiceReport, ReportRow, compare_reports, dice
from .io import ArrayRaster, RasterReader, render_overlay, write_image, write_mask
from .predictor.builtin import BorderDegradedPredictor
from .stitcher import StitchReport, stitch_full
from .tiler import RasterExtent, make_grid

log = logging.getLogger(__name__)

BACKGROUND_RGB = (222, 210, 228)
FOREGROUND_RGB = (140, 80, 150)
TEXTURE_AMPLITUDE = 20

_OBJECT_STREAM = 0x6F626A
_TEXTURE_STREAM = 0x746578


@dataclass(frozen=True)
class SynthSlideSpec:
    extent: RasterExtent
    object_count: int
    radius_range: tuple[int, int]
    seed: int
    group: str = "synthetic"
    slide_id: str = ""

    @property
    def name(self) -> str:
        return self.slide_id or f"synth-{self.seed}"


def place_objects(spec: SynthSlideSpec) -> np.ndarray:
    """Ellipse parameters ``(cx, cy, rx, ry)`` as an ``(n, 4)`` int64 array."""
    rmin, rmax = spec.radius_range
    if rmin < 1 or rmax < rmin:
        raise InfeasibleSpec(f"invalid radius range {spec.radius_range}")
    W, H = spec.extent.width, spec.extent.height
    n = spec.object_count
    if n == 0:
        return np.zeros((0, 4), dtype=np.int64)
    if 2 * rmin + 1 > W or 2 * rmin + 1 > H:
        raise InfeasibleSpec(f"objects of radius {rmin} cannot fit in {W}x{H}")
    idx = np.arange(n)
    # cap radii so every object fits on its axis
    rx = np.minimum(rmin + np.floor(rng.uniform(spec.seed, _OBJECT_STREAM, idx, 0) * (rmax - rmin + 1)),
                    (W - 1) // 2).astype(np.int64)
    ry = np.minimum(rmin + np.floor(rng.uniform(spec.seed, _OBJECT_STREAM, idx, 1) * (rmax - rmin + 1)),
                    (H - 1) // 2).astype(np.int64)
    if np.any(rx < rmin) or np.any(ry < rmin):
        raise InfeasibleSpec(f"radius range {spec.radius_range} does not fit in {W}x{H}")
    span_x = W - 2 * rx
    span_y = H - 2 * ry
    cx = rx + np.floor(rng.uniform(spec.seed, _OBJECT_STREAM, idx, 2) * span_x).astype(np.int64)
    cy = ry + np.floor(rng.uniform(spec.seed, _OBJECT_STREAM, idx, 3) * span_y).astype(np.int64)
    return np.stack([cx, cy, rx, ry], axis=1)


def rasterize(objects: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    """Union of ellipses over the window ``[x0, x1) x [y0, y1)`` as a uint8 mask."""
    out = np.zeros((y1 - y0, x1 - x0), dtype=np.uint8)
    if len(objects) == 0:
        return out
    cx, cy, rx, ry = objects.T
    hit = (cx + rx >= x0) & (cx - rx < x1) & (cy + ry >= y0) & (cy - ry < y1)
    for ox, oy, ex, ey in objects[hit]:
        bx0, bx1 = max(x0, ox - ex), min(x1, ox + ex + 1)
        by0, by1 = max(y0, oy - ey), min(y1, oy + ey + 1)
        dx = (np.arange(bx0, bx1) - ox) / ex
        dy = (np.arange(by0, by1) - oy) / ey
        inside = dy[:, None] ** 2 + dx[None, :] ** 2 <= 1.0
        out[by0 - y0:by1 - y0, bx0 - x0:bx1 - x0] |= inside.astype(np.uint8)
    return out


class _SlideTruth(RasterReader):
    channels = 1

    def __init__(self, extent, objects):
        self.extent = extent
        self.objects = objects

    def _read_region(self, x0, y0, x1, y1):
        return rasterize(self.objects, x0, y0, x1, y1)[..., None]


class _SlideImage(RasterReader):
    channels = 3

    def __init__(self, extent, objects, seed):
        self.extent = extent
        self.objects = objects
        self.seed = seed

    def _read_region(self, x0, y0, x1, y1):
        truth = rasterize(self.objects, x0, y0, x1, y1).astype(bool)
        rows = np.arange(y0, y1)[:, None]
        cols = np.arange(x0, x1)[None, :]
        u = rng.uniform(self.seed, _TEXTURE_STREAM, rows, cols)
        texture = np.floor(u * (2 * TEXTURE_AMPLITUDE + 1)).astype(np.int16) - TEXTURE_AMPLITUDE
        base = np.where(truth[..., None], np.array(FOREGROUND_RGB, np.int16), np.array(BACKGROUND_RGB, np.int16))
        return np.clip(base + texture[..., None], 0, 255).astype(np.uint8)


class SyntheticSlide:
    """Lazily rendered synthetic slide: ``image`` and ``truth`` are raster readers."""

    def __init__(self, spec: SynthSlideSpec):
        self.spec = spec
        self.objects = place_objects(spec)
        self.image: RasterReader = _SlideImage(spec.extent, self.objects, spec.seed)
        self.truth: RasterReader = _SlideTruth(spec.extent, self.objects)

    def materialize(self) -> "SyntheticSlide":
        """Render image and truth once into memory for fast repeated reads."""
        self.image = ArrayRaster(self.image.read_all())
        self.truth = ArrayRaster(self.truth.read_all())
        return self

    def straddle_fraction(self, tile_size: int) -> float:
        """Share of objects whose bounding box crosses a non-overlapping tile boundary."""
        if len(self.objects) == 0:
            return 0.0
        cx, cy, rx, ry = self.objects.T
        crosses_x = (cx - rx) // tile_size != (cx + rx) // tile_size
        crosses_y = (cy - ry) // tile_size != (cy + ry) // tile_size
        return float(np.mean(crosses_x | crosses_y))


def generate_slide(spec: SynthSlideSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render a slide fully: ``(H, W, 3)`` uint8 image and ``(H, W)`` uint8 truth."""
    slide = SyntheticSlide(spec)
    return slide.image.read_all(), slide.truth.read_labels()


# ---------------------------------------------------------------------------
# experiment


@dataclass(frozen=True)
class ExperimentConfig:
    slide_specs: tuple[SynthSlideSpec, ...]
    tile_size: int = 512
    stride_overlap: int | None = None
    border_frac: float = 0.125
    flip_prob: float = 0.8
    predictor_seed: int = 0
    noise: float = 0.0

    def __post_init__(self):
        if self.stride_overlap is None:
            object.__setattr__(self, "stride_overlap", self.tile_size // 2)
        if not 1 <= self.stride_overlap <= self.tile_size:
            raise ValueError(f"stride_overlap must be in [1, {self.tile_size}]")

    @property
    def stride_control(self) -> int:
        return self.tile_size


@dataclass
class SlideOutcome:
    slide_id: str
    group: str
    control: ReportRow
    stitched: ReportRow
    control_report: StitchReport
    stitched_report: StitchReport
    straddle_fraction: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    control: DiceReport
    stitched: DiceReport
    deltas: DeltaTable
    outcomes: list[SlideOutcome] = field(default_factory=list)

    @property
    def mean_delta(self) -> float:
        vals = [d for d in self.deltas.unit_deltas.values() if d is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def win_fraction(self) -> float:
        vals = [d for d in self.deltas.unit_deltas.values() if d is not None]
        return float(np.mean([d >= 0 for d in vals])) if vals else float("nan")

    def summary(self) -> dict:
        return {
            "slides": len(self.outcomes),
            "mean_delta_pp": self.mean_delta,
            "stitched_ge_control_fraction": self.win_fraction,
            "mean_delta_positive": self.mean_delta > 0,
            "control_avg": self.control.overall_mean,
            "stitched_avg": self.stitched.overall_mean,
            "border_straddle_fraction": float(np.mean([o.straddle_fraction for o in self.outcomes]))
            if self.outcomes else 0.0,
            "max_contributors": max((o.stitched_report.max_contributors_seen for o in self.outcomes), default=0),
        }

    def format_summary(self) -> str:
        s = self.summary()
        return (f"slides: {s['slides']}  control Avg.: {s['control_avg']:.2f}  "
                f"stitched Avg.: {s['stitched_avg']:.2f}\n"
                f"mean delta: {s['mean_delta_pp']:+.3f} pp  stitched >= control on "
                f"{s['stitched_ge_control_fraction'] * 100:.0f}% of slides  "
                f"border-straddling objects: {s['border_straddle_fraction'] * 100:.1f}%\n")


def _run_slide(config: ExperimentConfig, spec: SynthSlideSpec, out_dir: Path | None,
               overlays: bool) -> SlideOutcome:
    slide = SyntheticSlide(spec)
    if spec.extent.area <= 8192 * 8192:
        slide.materialize()
    truth = slide.truth.read_labels()
    predictor = BorderDegradedPredictor(truth=slide.truth, border_frac=config.border_frac,
                                        flip_prob=config.flip_prob, seed=config.predictor_seed,
                                        noise=config.noise)
    arms = {}
    for arm, stride in (("control", config.stride_control), ("stitched", config.stride_overlap)):
        grid = make_grid(spec.extent, config.tile_size, stride)
        mask, report = stitch_full(grid, predictor, slide.image)
        arms[arm] = (mask, report)
        if out_dir is not None:
            write_mask(out_dir / f"{spec.name}_{arm}_mask.png", mask)
            if overlays:
                write_image(out_dir / f"{spec.name}_{arm}_overlay.png",
                            render_overlay(slide.image.read_all(), mask, truth))
    if out_dir is not None:
        write_mask(out_dir / f"{spec.name}_truth.png", truth)
    (cm, cr), (sm, sr) = arms["control"], arms["stitched"]
    return SlideOutcome(
        slide_id=spec.name, group=spec.group,
        control=ReportRow(spec.name, spec.group, dice(cm, truth)),
        stitched=ReportRow(spec.name, spec.group, dice(sm, truth)),
        control_report=cr, stitched_report=sr,
        straddle_fraction=slide.straddle_fraction(config.tile_size),
    )


def run_experiment(config: ExperimentConfig, workers: int = 1, out_dir=None,
                   overlays: bool = False) -> ExperimentResult:
    """Run both arms on every slide and compare their Dice reports (stitched minus control)."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    specs = list(config.slide_specs)
    if workers <= 1:
        outcomes = [_run_slide(config, s, out, overlays) for s in specs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda s: _run_slide(config, s, out, overlays), specs))
    control = DiceReport.build([o.control for o in outcomes])
    stitched = DiceReport.build([o.stitched for o in outcomes])
    result = ExperimentResult(config, control, stitched, compare_reports(control, stitched), outcomes)
    if out is not None:
        control.write(out, "control")
        stitched.write(out, "stitched")
        (out / "deltas.txt").write_text(result.deltas.format_table() + "\n" + result.format_summary(),
                                        encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# presets and config files

DESK_GROUPS = ("G1", "G2", "G3", "G4")


def slide_series(count: int, width: int, height: int, object_count: int, radius_range: tuple[int, int],
                 seed: int, groups=DESK_GROUPS) -> tuple[SynthSlideSpec, ...]:
    extent = RasterExtent(width=width, height=height)
    return tuple(
        SynthSlideSpec(extent=extent, object_count=object_count, radius_range=tuple(radius_range),
                       seed=seed + i, group=groups[i % len(groups)], slide_id=f"synth-{i:02d}")
        for i in range(count)
    )


PRESETS = {
    "paper-desk": ExperimentConfig(
        slide_specs=slide_series(8, 4096, 4096, object_count=60, radius_range=(40, 96), seed=1000),
        tile_size=512, stride_overlap=256, border_frac=0.125, flip_prob=0.8, predictor_seed=7,
    ),
    "smoke": ExperimentConfig(
        slide_specs=slide_series(4, 1024, 1024, object_count=8, radius_range=(24, 48), seed=2000),
        tile_size=256, stride_overlap=128, border_frac=0.125, flip_prob=0.8, predictor_seed=7,
    ),
}


def config_from_mapping(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build an experiment config from a parsed key-value file (see README for the schema)."""
    base = base or PRESETS["paper-desk"]
    pred = data.get("predictor", {})
    kwargs = {
        "tile_size": int(data.get("tile_size", base.tile_size)),
        "border_frac": float(pred.get("border_frac", base.border_frac)),
        "flip_prob": float(pred.get("flip_prob", base.flip_prob)),
        "predictor_seed": int(pred.get("seed", base.predictor_seed)),
        "noise": float(pred.get("noise", base.noise)),
    }
    if "stride_overlap" in data:
        kwargs["stride_overlap"] = int(data["stride_overlap"])
    elif "tile_size" in data:
        kwargs["stride_overlap"] = kwargs["tile_size"] // 2
    else:
        kwargs["stride_overlap"] = base.stride_overlap
    specs = base.slide_specs
    if "slide" in data:
        specs = tuple(
            SynthSlideSpec(extent=RasterExtent(width=int(s["width"]), height=int(s["height"])),
                           object_count=int(s["object_count"]),
                           radius_range=(int(s["radius_min"]), int(s["radius_max"])),
                           seed=int(s["seed"]), group=str(s.get("group", "synthetic")),
                           slide_id=str(s.get("id", "")))
            for s in data["slide"]
        )
    elif "slides" in data:
        s = data["slides"]
        groups = tuple(s.get("groups", DESK_GROUPS))
        specs = slide_series(int(s.get("count", 8)), int(s.get("width", 4096)), int(s.get("height", 4096)),
                             int(s.get("object_count", 60)),
                             (int(s.get("radius_min", 40)), int(s.get("radius_max", 96))),
                             int(s.get("seed", 1000)), groups)
    return replace(base, slide_specs=specs, **kwargs)
