"""Command-line entry point: ``glomstitch {tile,infer,reassemble,eval,compare,synth}``.

Settings resolve in this order, later winning: built-in defaults, ``--preset``,
``--config`` file, ``GLOMSTITCH_*`` environment variables, explicit flags.
Exit codes: 0 success, 1 some units failed, 2 configuration error,
3 predictor protocol error.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import ConfigError, GlomStitchError, ProtocolError, TileFailure
from .predictor.wire import PROTOCOL_VERSION

log = logging.getLogger("glomstitch")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_PROTOCOL = 0, 1, 2, 3
ENV_PREFIX = "GLOMSTITCH_"
IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}

PRESETS = {
    "kpis": {"tile_size": 2048, "stride": 1024},
    "mice": {"tile_size": 1024, "stride": 512},
}


@dataclass
class RunConfig:
    tile_size: int = 2048
    stride: int | None = None
    classes: int = 2
    predictor: str = "threshold"
    endpoint: str | None = None
    timeout: float = 60.0
    noise: float = 0.0
    seed: int = 0
    border_frac: float = 0.125
    flip_prob: float = 0.8
    threshold: float = 150.0
    input_size: int = 768
    workers: int = 1
    codec: str = "canonical"
    visual: bool = False
    prob_maps: bool = False
    overlays: bool = False

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.tile_size // 2 or 1

    def validate(self) -> "RunConfig":
        if self.tile_size < 1:
            raise ConfigError("tile size must be positive")
        if not 1 <= self.stride <= self.tile_size:
            raise ConfigError(f"stride must be in [1, tile size {self.tile_size}], got {self.stride}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
# flag dest -> RunConfig field
_FLAG_FIELDS = {"tile": "tile_size", "stride": "stride", "classes": "classes", "predictor": "predictor",
                "endpoint": "endpoint", "timeout": "timeout", "noise": "noise", "seed": "seed",
                "border_frac": "border_frac", "flip_prob": "flip_prob", "threshold": "threshold",
                "workers": "workers", "codec": "codec", "visual": "visual", "prob_maps": "prob_maps",
                "overlays": "overlays"}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if value is None:
        return None
    if "bool" in kind:
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return str(value)


def resolve_config(args, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values: dict = {}

    def layer(update: dict):
        # a layer that moves the tile without naming a stride gets the half-tile default back
        values.update(update)
        if "tile_size" in update and "stride" not in update:
            values["stride"] = max(1, values["tile_size"] // 2)

    if getattr(args, "preset", None):
        layer(PRESETS[args.preset])
    if getattr(args, "config", None):
        data = load_config(args.config)
        data = data.get("config", data)  # run manifests nest the config
        flat = dict(data)
        flat.update(flat.pop("predictor_params", {}) or {})
        if isinstance(flat.get("predictor"), dict):
            table = flat.pop("predictor")
            flat["predictor"] = table.pop("name", "threshold")
            flat.update(table)
        layer({key: _coerce(key, val) for key, val in flat.items() if key in _FIELDS})
    layer({name: _coerce(name, environ[ENV_PREFIX + name.upper()]) for name in _FIELDS
           if ENV_PREFIX + name.upper() in environ})
    layer({name: getattr(args, dest) for dest, name in _FLAG_FIELDS.items() if getattr(args, dest, None) is not None})
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_predictor(cfg: RunConfig):
    from .predictor import BorderDegradedPredictor, ConstantPredictor, ExternalPredictor, \
        ThresholdOraclePredictor

    if cfg.endpoint or cfg.predictor == "external":
        if not cfg.endpoint:
            raise ConfigError("external predictor needs --endpoint")
        client = ExternalPredictor.connect(cfg.endpoint, timeout=cfg.timeout)
        if client.classes != cfg.classes:
            log.info("external predictor reports %d classes", client.classes)
        return client
    if cfg.predictor == "threshold":
        return ThresholdOraclePredictor(noise=cfg.noise, seed=cfg.seed, classes=cfg.classes,
                                        input_size=cfg.input_size, intensity_threshold=cfg.threshold)
    if cfg.predictor == "border-degraded":
        return BorderDegradedPredictor(border_frac=cfg.border_frac, flip_prob=cfg.flip_prob, seed=cfg.seed,
                                       noise=cfg.noise, classes=cfg.classes, input_size=cfg.input_size,
                                       intensity_threshold=cfg.threshold)
    if cfg.predictor == "constant":
        values = np.zeros(cfg.classes, dtype=np.float32)
        return ConstantPredictor(values, input_size=cfg.input_size)
    raise ConfigError(f"unknown predictor {cfg.predictor!r}")


def _close(predictor) -> None:
    close = getattr(predictor, "close", None)
    if close is not None:
        close()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _collect_inputs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_tile(args) -> int:
    from .io import open_raster, write_image
    from .tiler import PatchRecord, format_patch_filename, make_grid

    cfg = resolve_config(args)
    reader = open_raster(args.image)
    grid = make_grid(reader.extent, cfg.tile_size, cfg.stride)
    wsi_id = args.wsi_id or Path(args.image).stem
    listing = {"extent": [reader.extent.width, reader.extent.height], "tile_size": grid.tile_size,
               "stride": grid.stride, "tiles": [[t.x, t.y] for t in grid]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for t in grid:
            name = format_patch_filename(PatchRecord(wsi_id, t.x, t.y, t.size), cfg.codec, ext="png")
            write_image(out / name, reader.read_window(t.x, t.y, t.size, t.size))
    json.dump(listing, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def infer_slide(image_path: Path, out_dir: Path, cfg: RunConfig, predictor) -> dict:
    from .io import open_raster

    with open_raster(image_path) as reader:
        return _infer_reader(reader, image_path.stem, out_dir, cfg, predictor)


def _infer_reader(reader, stem: str, out_dir: Path, cfg: RunConfig, predictor) -> dict:
    from .io import PngMaskWriter, ProbPngWriter, read_mask, render_overlay, write_image
    from .stitcher import stitch_full
    from .tiler import make_grid

    grid = make_grid(reader.extent, cfg.tile_size, cfg.stride)
    mask_path = out_dir / f"{stem}_mask.png"
    sink = PngMaskWriter(mask_path, reader.extent, visual_scale=255 if cfg.visual else 1)
    prob_sink = ProbPngWriter(out_dir / f"{stem}_prob.png", reader.extent) if cfg.prob_maps else None
    try:
        _, report = stitch_full(grid, predictor, reader, sink=sink, prob_sink=prob_sink, workers=cfg.workers)
    except BaseException:
        sink.abort()
        if prob_sink is not None:
            prob_sink.abort()
        raise
    outputs = [mask_path] + ([out_dir / f"{stem}_prob.png"] if prob_sink else [])
    if cfg.overlays:
        labels = read_mask(mask_path)
        if cfg.visual:
            labels = labels // 255
        overlay = out_dir / f"{stem}_overlay.png"
        write_image(overlay, render_overlay(reader.read_all(), labels))
        outputs.append(overlay)
    return {"report": report.as_dict(), "outputs": [str(p) for p in outputs]}


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = _collect_inputs(args.images)
    if not inputs:
        raise ConfigError("no input images")
    predictor = build_predictor(cfg)
    results, failures = {}, {}
    protocol_failed = False
    try:
        for path in inputs:
            try:
                results[str(path)] = infer_slide(path, out_dir, cfg, predictor)
                log.info("%s: %s", path.name, results[str(path)]["report"])
            except (GlomStitchError, OSError) as exc:
                cause = exc.cause if isinstance(exc, TileFailure) else exc
                protocol_failed |= isinstance(cause, ProtocolError)
                failures[str(path)] = f"{type(cause).__name__}: {exc}"
                log.error("%s failed: %s", path, exc)
    finally:
        _close(predictor)
    manifest = {
        "tool": f"glomstitch {__version__}",
        "protocol_version": PROTOCOL_VERSION,
        "command": "infer",
        "config": dataclasses.asdict(cfg),
        "images": [str(p) for p in inputs],
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {o: sha256_file(o) for r in results.values() for o in r["outputs"]},
        "reports": {k: v["report"] for k, v in results.items()},
        "failures": failures,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    for path, err in failures.items():
        print(f"FAILED {path}: {err}", file=sys.stderr)
    if protocol_failed:
        return EXIT_PROTOCOL
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_reassemble(args) -> int:
    from .io import open_raster, read_shard, write_mask, write_shard
    from .stitcher import reassemble_patches
    from .tiler import parse_patch_filename

    cfg = resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in Path(args.input).iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES | {".wssh"})
    records, bad = [], []
    for p in files:
        try:
            records.append(parse_patch_filename(str(p), cfg.codec))
        except GlomStitchError as exc:
            bad.append((p, exc))
    for p, exc in bad:
        print(f"UNPARSED {p.name}: {exc}", file=sys.stderr)

    shard_dir = None
    predictor = None
    if any(not r.payload_path.endswith(".wssh") for r in records):
        predictor = build_predictor(cfg)
        shard_dir = tempfile.TemporaryDirectory(prefix="glomstitch-shards-")
    shard_paths: dict = {}
    failed = []
    try:
        for r in records:
            if r.payload_path.endswith(".wssh"):
                shard_paths[r] = r.payload_path
                continue
            try:
                patch = open_raster(r.payload_path).read_window(0, 0, r.size, r.size)
                target = Path(shard_dir.name) / (Path(r.payload_path).stem + ".wssh")
                write_shard(target, predictor.predict(patch, r.tile))
                shard_paths[r] = str(target)
            except (GlomStitchError, OSError) as exc:
                failed.append((r, exc))

        load = functools.lru_cache(maxsize=64)(read_shard)
        by_slide: dict[str, list] = {}
        for r in shard_paths:
            by_slide.setdefault(r.wsi_id, []).append(r)
        counts = {}
        for wsi_id, recs in by_slide.items():
            xy = np.array([[r.x, r.y, r.size] for r in recs])
            for target in recs:
                near = (xy[:, 0] < target.x + target.size) & (target.x < xy[:, 0] + xy[:, 2]) & \
                       (xy[:, 1] < target.y + target.size) & (target.y < xy[:, 1] + xy[:, 2])
                neighbors = [(recs[i], load(shard_paths[recs[i]])) for i in np.flatnonzero(near)]
                try:
                    mask = reassemble_patches(neighbors, target)
                except GlomStitchError as exc:
                    failed.append((target, exc))
                    continue
                write_mask(out_dir / (Path(target.payload_path).stem + "_mask.png"), mask,
                           visual_scale=255 if cfg.visual else 1)
                counts[wsi_id] = counts.get(wsi_id, 0) + 1
    finally:
        if predictor is not None:
            _close(predictor)
        if shard_dir is not None:
            shard_dir.cleanup()
    for r, exc in failed:
        print(f"FAILED {r.payload_path}: {exc}", file=sys.stderr)
    print(json.dumps({"masks_per_slide": counts, "unparsed": [p.name for p, _ in bad],
                      "failed": [r.payload_path for r, _ in failed]}))
    return EXIT_PARTIAL if (bad or failed) else EXIT_OK


def _group_lookup(args):
    if args.manifest:
        from .ingest import load_manifest

        groups = load_manifest(args.manifest, check_extents=False).groups
    elif args.groups:
        import csv

        with open(args.groups, encoding="utf-8", newline="") as fh:
            groups = {row["unit_id"]: row["group"] for row in csv.DictReader(fh)}
    else:
        return lambda unit: "all"

    def lookup(unit: str) -> str:
        if unit in groups:
            return groups[unit]
        from .tiler import parse_patch_filename

        try:
            wsi = parse_patch_filename(unit, None).wsi_id
        except GlomStitchError:
            return "unknown"
        return groups.get(wsi, "unknown")

    return lookup


def cmd_eval(args) -> int:
    from .evaluation import evaluate_units

    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    lookup = _group_lookup(args)
    pairs = []
    for truth in sorted(p for p in truth_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        unit = truth.stem
        for suffix in ("_truth", "_mask"):
            if unit.endswith(suffix):
                unit = unit[: -len(suffix)]
        candidates = [pred_dir / f"{unit}{s}{ext}" for s in ("_mask", "") for ext in (".png", ".tif", ".tiff")]
        pred = next((c for c in candidates if c.exists()), candidates[0])
        pairs.append((unit, lookup(unit), str(pred), str(truth)))
    workers = args.workers or int(os.environ.get(ENV_PREFIX + "WORKERS", 1))
    report = evaluate_units(pairs, workers=workers, averaging="units" if args.micro else "groups",
                            foreground_class=args.foreground_class)
    if args.out:
        report.write(args.out, args.stem)
    sys.stdout.write(report.to_json() if args.json else report.format_table())
    return EXIT_PARTIAL if report.failed else EXIT_OK


def cmd_compare(args) -> int:
    from .evaluation import DiceReport, compare_reports

    a = DiceReport.from_json(Path(args.a).read_text(encoding="utf-8"))
    b = DiceReport.from_json(Path(args.b).read_text(encoding="utf-8"))
    table = compare_reports(a, b)
    sys.stdout.write(json.dumps(table.to_dict(), indent=2) + "\n" if args.json else table.format_table())
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import synthbench
    from .io import write_image, write_mask

    if args.preset not in synthbench.PRESETS:
        raise ConfigError(f"unknown synth preset {args.preset!r}")
    config = synthbench.PRESETS[args.preset]
    if args.config:
        config = synthbench.config_from_mapping(load_config(args.config), config)
    if args.write_slides:
        dest = Path(args.write_slides)
        (dest / "images").mkdir(parents=True, exist_ok=True)
        (dest / "truth").mkdir(parents=True, exist_ok=True)
        entries = []
        for spec in config.slide_specs:
            image, truth = synthbench.generate_slide(spec)
            write_image(dest / "images" / f"{spec.name}.png", image)
            write_mask(dest / "truth" / f"{spec.name}.png", truth)
            entries.append(f'[[slide]]\nwsi_id = "{spec.name}"\ngroup = "{spec.group}"\n'
                           f'image = "images/{spec.name}.png"\ntruth = "truth/{spec.name}.png"\n')
        (dest / "manifest.toml").write_text(f"patch_size = {config.tile_size}\n\n" + "\n".join(entries),
                                            encoding="utf-8")
        if args.no_run:
            return EXIT_OK
    workers = args.workers or int(os.environ.get(ENV_PREFIX + "WORKERS", 1))
    result = synthbench.run_experiment(config, workers=workers, out_dir=args.out, overlays=args.overlays)
    if args.json:
        sys.stdout.write(json.dumps({"summary": result.summary(), "deltas": result.deltas.to_dict()},
                                    indent=2) + "\n")
    else:
        sys.stdout.write(result.deltas.format_table() + "\n" + result.format_summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file, or a run_manifest.json to replay")
    p.add_argument("--preset", choices=sorted(PRESETS), help="kpis: tile 2048; mice: tile 1024")
    p.add_argument("--tile", type=int, help="tile side N (default 2048)")
    p.add_argument("--stride", type=int, help="window stride (default N/2)")
    p.add_argument("--classes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--codec", help="patch filename convention (canonical, kpis, mice)")
    p.add_argument("--predictor", choices=["threshold", "border-degraded", "constant", "external"])
    p.add_argument("--endpoint", help="external predictor: tcp://host:port, unix:/path or stdio:<cmd>")
    p.add_argument("--timeout", type=float, help="seconds per patch for external predictors")
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--border-frac", dest="border_frac", type=float)
    p.add_argument("--flip-prob", dest="flip_prob", type=float)
    p.add_argument("--threshold", type=float, help="intensity threshold of the built-in oracles")
    p.add_argument("--visual", action="store_const", const=True, help="scale mask labels by 255")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glomstitch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"glomstitch {__version__} (protocol {PROTOCOL_VERSION})")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="compute a tile grid and optionally write the tiles")
    _add_run_options(p)
    p.add_argument("image")
    p.add_argument("--out")
    p.add_argument("--wsi-id", dest="wsi_id")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("infer", help="sliding-window inference with overlap stitching")
    _add_run_options(p)
    p.add_argument("images", nargs="+", help="slide images or directories of them")
    p.add_argument("--out", required=True)
    p.add_argument("--prob", dest="prob_maps", action="store_const", const=True,
                   help="also write foreground probability maps")
    p.add_argument("--overlay", dest="overlays", action="store_const", const=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("reassemble", help="patch-level stitch-then-crop over coordinate-named patches")
    _add_run_options(p)
    p.add_argument("input", help="directory of patch images or .wssh score shards")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reassemble)

    p = sub.add_parser("eval", help="Dice report of predicted masks against truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--manifest", help="dataset manifest providing groups")
    p.add_argument("--groups", help="CSV with unit_id,group columns")
    p.add_argument("--micro", action="store_true", help="Avg. over units instead of over groups")
    p.add_argument("--foreground-class", dest="foreground_class", type=int,
                   help="foreground label (default: any nonzero label)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="directory for report.csv/json/txt")
    p.add_argument("--stem", default="report")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="per-unit and per-group Dice deltas (B - A)")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="synthetic with/without-overlap stitching experiment")
    p.add_argument("--preset", default="paper-desk")
    p.add_argument("--config")
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--write-slides", dest="write_slides", help="also write slide images, truth and a manifest")
    p.add_argument("--no-run", dest="no_run", action="store_true", help="with --write-slides: skip the experiment")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (GlomStitchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
