"""Command-line entry point: ``gen``, ``fit``, ``eval`` and ``gradcheck``.

Every command writes a ``manifest.json`` next to its outputs recording the
resolved configuration, its hash, the seed, the tool version and the hash
of every output file. A manifest can be passed back as ``--config`` to
reproduce the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__, gradcheck
from .errors import ConfigError, Perspective3DError
from .evaluation import DEFAULT_IOU_THRESHOLD, Detection, GroundTruth, evaluate
from .fitting import FIT_WEIGHTS, FitConfig, fit_box, initial_guess
from .losses import LossWeights
from .synth import SCHEMA_VERSION, Scene, SynthConfig, default_sizes, generate_dataset_scene

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("perspective3d")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


class DataError(Perspective3DError):
    """Input data is missing, malformed or inconsistent."""


# --- io helpers ---------------------------------------------------------------


def dumps(obj) -> str:
    """Canonical JSON text used for every file the CLI writes."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(config: Mapping) -> str:
    return sha256_bytes(json.dumps(config, sort_keys=True, separators=(",", ":")).encode())


class OutputDir:
    """Writes files under one directory and remembers their hashes."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hashes: dict[str, str] = {}

    def write(self, name: str, text: str) -> Path:
        data = text.encode()
        path = self.root / name
        path.write_bytes(data)
        self.hashes[name] = sha256_bytes(data)
        return path

    def manifest(self, command: str, config: Mapping, seed, inputs: Mapping | None = None) -> dict:
        manifest = {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "config": dict(config),
            "config_hash": config_hash(config),
            "inputs": dict(inputs or {}),
            "outputs": dict(sorted(self.hashes.items())),
        }
        (self.root / "manifest.json").write_text(dumps(manifest))
        return manifest


def load_config(path: str | Path | None) -> dict:
    """JSON or TOML mapping; a run manifest yields its recorded config."""
    if path is None:
        return {}
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(raw.decode())
        else:
            data = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    if "command" in data and "config" in data and "config_hash" in data:
        data = data["config"]
    return data


def build(cls, options: Mapping, section: str):
    """Construct a config dataclass from ``options``, naming the offending
    field on failure."""
    options = dict(options)
    try:
        return cls.from_dict(options)
    except (TypeError, ValueError) as exc:
        message = str(exc)
        for key in options:
            try:
                cls.from_dict({key: options[key]})
            except (TypeError, ValueError) as single:
                raise ConfigError(f"{section}.{key}: {single}") from exc
        raise ConfigError(f"{section}: {message}") from exc


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from exc


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# --- dataset ------------------------------------------------------------------


def scene_filename(index: int) -> str:
    return f"scene_{index:05d}.json"


def _gen_one(args) -> tuple[str, str]:
    cfg, index = args
    scene = generate_dataset_scene(cfg, index)
    return scene_filename(index), dumps(scene.to_dict())


def load_dataset(root: str | Path) -> tuple[dict, list[Scene]]:
    root = Path(root)
    index = _read_json(root / "index.json")
    if not isinstance(index, dict) or index.get("schema") != SCHEMA_VERSION or "scenes" not in index:
        raise DataError(f"{root / 'index.json'} is not a schema {SCHEMA_VERSION} dataset index")
    scenes = []
    for name in index["scenes"]:
        try:
            scenes.append(Scene.from_dict(_read_json(root / name)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed scene file {root / name}: {exc}") from exc
    return index, scenes


def _dataset_digest(root: Path) -> str:
    try:
        return sha256_bytes((Path(root) / "index.json").read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read dataset index in {root}: {exc}") from exc


def cmd_gen(config_path, out, seed: int | None = None, jobs: int = 1) -> dict:
    options = load_config(config_path)
    if seed is not None:
        options["seed"] = seed
    cfg = build(SynthConfig, options, "synth")
    resolved = cfg.to_dict()
    out = OutputDir(out)
    files = _map(_gen_one, [(cfg, i) for i in range(cfg.num_scenes)], jobs)
    for name, text in files:
        out.write(name, text)
    index = {
        "schema": SCHEMA_VERSION,
        "num_scenes": cfg.num_scenes,
        "class_names": list(cfg.class_names),
        "default_sizes": default_sizes(cfg).tolist(),
        "scenes": [name for name, _ in files],
        "config": resolved,
    }
    out.write("index.json", dumps(index))
    logger.info("wrote %d scenes to %s", cfg.num_scenes, out.root)
    return out.manifest("gen", resolved, cfg.seed)


# --- fitting ------------------------------------------------------------------


TRACE_COLUMNS = ["image_id", "object", "iteration", "phase", "proj", "floor", "d1", "d2", "grav", "total"]


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _fit_scene(args) -> tuple[list[dict], list[dict], str]:
    scene, sizes, cfg, weights = args
    detections, failures = [], []
    traces = io.StringIO()
    writer = csv.DictWriter(traces, fieldnames=TRACE_COLUMNS, restval="", lineterminator="\n")
    if scene.observations is None or len(scene.observations) != len(scene.objects):
        raise DataError(f"{scene.scene_id}: observations missing or misaligned with objects")
    for k, (obj, obs) in enumerate(zip(scene.objects, scene.observations)):
        try:
            init = initial_guess(obs, scene.camera, obj.roi, default_size=sizes[obj.cls])
            res = fit_box(obs, init, scene.camera, obj.roi, weights, cfg)
            if not math.isfinite(res.loss):
                raise FloatingPointError(f"non-finite final loss {res.loss}")
        except (Perspective3DError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            failures.append({"image_id": scene.scene_id, "object": k, "error": f"{type(exc).__name__}: {exc}"})
            continue
        det = Detection(scene.scene_id, obj.cls, math.exp(-res.loss), res.box)
        detections.append({**det.to_dict(), "object": k, "status": res.status, "loss": res.loss})
        for row in res.trace.rows:
            writer.writerow({"image_id": scene.scene_id, "object": k, **{c: _cell(v) for c, v in row.items()}})
    return detections, failures, traces.getvalue()




def resolve_fit_config(options: Mapping) -> tuple[FitConfig, LossWeights, dict]:
    options = dict(options)
    unknown = set(options) - {"fit", "weights"}
    if unknown:
        raise ConfigError(f"unknown fit config section(s): {', '.join(sorted(unknown))}")
    for section in ("fit", "weights"):
        if not isinstance(options.get(section, {}), Mapping):
            raise ConfigError(f"{section}: expected a table of options")
    cfg = build(FitConfig, options.get("fit", {}), "fit")
    weights = build(LossWeights, {**FIT_WEIGHTS.to_dict(), **options.get("weights", {})}, "weights")
    return cfg, weights, {"fit": cfg.to_dict(), "weights": weights.to_dict()}


def cmd_fit(dataset, out, config_path=None, seed: int | None = None, jobs: int = 1) -> dict:
    cfg, weights, resolved = resolve_fit_config(load_config(config_path))
    index, scenes = load_dataset(dataset)
    sizes = np.asarray(index.get("default_sizes") or [[1.0, 1.0, 1.0]], dtype=float)
    if any(o.cls >= len(sizes) for s in scenes for o in s.objects):
        raise DataError("object class outside the dataset's class list")
    results = _map(_fit_scene, [(s, sizes, cfg, weights) for s in scenes], jobs)
    detections = [d for dets, _, _ in results for d in dets]
    failures = [f for _, fails, _ in results for f in fails]
    out = OutputDir(out)
    out.write("detections.json", dumps(detections))
    out.write("failures.json", dumps(failures))
    out.write("traces.csv", ",".join(TRACE_COLUMNS) + "\n" + "".join(t for _, _, t in results))
    if failures:
        logger.warning("%d object(s) failed to fit; see failures.json", len(failures))
    logger.info("fitted %d object(s) in %d scene(s)", len(detections), len(scenes))
    return out.manifest("fit", resolved, seed, {"dataset_index": _dataset_digest(dataset)})


# --- evaluation ---------------------------------------------------------------


def load_detections(path) -> list[Detection]:
    data = _read_json(path)
    if not isinstance(data, list):
        raise DataError(f"{path}: detections must be a JSON array")
    try:
        return [Detection.from_dict(d) for d in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed detection: {exc}") from exc


def ground_truth(scenes: Iterable[Scene]) -> list[GroundTruth]:
    return [GroundTruth(s.scene_id, o.cls, o.box) for s in scenes for o in s.objects]


def pr_svg(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], size: int = 400) -> str:
    """Minimal precision-recall plot, one polyline per class."""
    pad = 40
    span = size - 2 * pad
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">precision</text>',
    ]
    for k, (name, (recall, precision)) in enumerate(series.items()):
        color = palette[k % len(palette)]
        pts = " ".join(f"{pad + r * span:.2f},{pad + (1 - p) * span:.2f}" for r, p in zip(recall, precision))
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="{size - pad + 4}" y="{pad + 14 * k + 10}" font-size="10" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_eval(detections_path, dataset, out, iou_threshold: float = DEFAULT_IOU_THRESHOLD, svg: bool = False) -> dict:
    if not (0.0 < iou_threshold <= 1.0):
        raise ConfigError(f"iou_threshold: must be in (0, 1], got {iou_threshold}")
    index, scenes = load_dataset(dataset)
    dets = load_detections(detections_path)
    known = {s.scene_id for s in scenes}
    missing = sorted({d.image_id for d in dets} - known)
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise DataError(f"{len(missing)} detection image id(s) not in the dataset: {shown}")
    names = list(index.get("class_names") or [])
    result = evaluate(dets, ground_truth(scenes), iou_threshold)
    out = OutputDir(out)
    out.write("metrics.json", dumps(result.to_dict(names)))
    curves = {}
    for c, series in sorted(result.per_class.items()):
        out.write(f"pr_class_{c}.csv", series.to_csv())
        curves[names[c] if c < len(names) else str(c)] = (series.recall.tolist(), series.precision.tolist())
    if svg:
        out.write("pr.svg", pr_svg(curves))
    mAP = result.map if result.per_class else 0.0
    logger.info("mAP@%g = %.6f over %d class(es)", iou_threshold, mAP, len(result.per_class))
    inputs = {"detections": sha256_bytes(Path(detections_path).read_bytes()), "dataset_index": _dataset_digest(dataset)}
    return out.manifest("eval", {"iou_threshold": iou_threshold, "svg": svg}, None, inputs)


# --- gradient check -----------------------------------------------------------


def cmd_gradcheck(out=None, seed: int = 0, num_configs: int = 100) -> gradcheck.GradCheckReport:
    report = gradcheck.run_suite(seed=seed, num_configs=num_configs)
    for line in report.lines():
        print(line)
    if out is not None:
        outdir = OutputDir(out)
        outdir.write("gradcheck.json", dumps(report.to_dict()))
        outdir.manifest("gradcheck", {"num_configs": num_configs}, seed)
    return report


# --- argument parsing ----------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perspective3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="synth config (JSON or TOML) or a previous manifest")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("fit", help="fit boxes to a dataset's observed perspective points")
    p.add_argument("dataset", help="dataset directory written by gen")
    p.add_argument("--config", help="fit config with [fit] and [weights] tables")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="recorded in the manifest; fitting is deterministic")
    p.add_argument("--jobs", type=_positive_int, default=1)

    p = sub.add_parser("eval", help="score detections against a dataset")
    p.add_argument("detections", help="detections JSON array")
    p.add_argument("dataset", help="dataset directory with the ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--iou-threshold", type=float, default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--svg", action="store_true", help="also write pr.svg")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--out", help="directory for gradcheck.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-configs", type=_positive_int, default=100)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "gen":
            cmd_gen(args.config, args.out, seed=args.seed, jobs=args.jobs)
        elif args.command == "fit":
            cmd_fit(args.dataset, args.out, config_path=args.config, seed=args.seed, jobs=args.jobs)
        elif args.command == "eval":
            cmd_eval(args.detections, args.dataset, args.out, iou_threshold=args.iou_threshold, svg=args.svg)
        else:
            report = cmd_gradcheck(args.out, seed=args.seed, num_configs=args.num_configs)
            if not report.passed:
                return EXIT_CHECK_FAILED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Perspective3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
