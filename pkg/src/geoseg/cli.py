"""Command-line front end.

Subcommands: gen-mask, track, synth-gen, train, predict, eval, overlay.
Exit status is 0 on success, 1 on usage or configuration errors and 2 on
data errors (unreadable files, bad calibration, size mismatches, ...).

Configuration is a flat JSON object whose keys are the fields of
:class:`Config` (training schedule, loss switches, vehicle geometry and
tracker parameters side by side). Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import ConfigError, DecodeError, GeosegError, SizeMismatch
from .geometry import VehicleParams, load_calibration
from .metrics import EvalResult, aggregate, inconsistent_flags, iou
from .net import load_checkpoint, save_checkpoint
from .pipeline import TrainConfig, load_frames, load_index, train, write_log
from .tracker import TrackerConfig, Tracks, track_frames
from .weakmask import PartialMask, load_mask, rasterize_partial_mask, save_mask

log = logging.getLogger("geoseg")

ROAD_TINT = np.array([0.0, 255.0, 0.0])
NONROAD_TINT = np.array([255.0, 0.0, 0.0])
TINT_ALPHA = 0.4
PAIR_COLOR = (255, 255, 0)
INCONSISTENT_COLOR = (255, 0, 255)


class UsageError(Exception):
    pass


# configuration -------------------------------------------------------------

_TRAIN_FIELDS = [f for f in fields(TrainConfig) if f.name != "tracker"]
_TRACKER_FIELDS = list(fields(TrackerConfig))


@dataclass(frozen=True)
class Config:
    """Every tunable in one place. ``threads`` caps BLAS/OpenMP pools."""

    train: TrainConfig = TrainConfig()
    raw_eq1: bool = False
    threads: int = 1

    @property
    def tracker(self) -> TrackerConfig:
        return self.train.tracker

    def to_json(self) -> dict:
        out = {f.name: getattr(self.train, f.name) for f in _TRAIN_FIELDS}
        out.update({f.name: getattr(self.tracker, f.name) for f in _TRACKER_FIELDS})
        out["raw_eq1"] = self.raw_eq1
        out["threads"] = self.threads
        return out


def _field_types() -> dict[str, type]:
    """Field name -> type of its default value."""
    types = {f.name: type(getattr(TrainConfig(), f.name)) for f in _TRAIN_FIELDS}
    types.update({f.name: type(getattr(TrackerConfig(), f.name)) for f in _TRACKER_FIELDS})
    types["raw_eq1"] = bool
    types["threads"] = int
    return types


def _coerce(name: str, value, kind: type):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def parse_config(data: dict) -> Config:
    """Validate a flat config dict; unknown or out-of-range fields are named in the error."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    types = _field_types()
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    vals = {k: _coerce(k, v, types[k]) for k, v in data.items()}
    trk = {f.name: vals[f.name] for f in _TRACKER_FIELDS if f.name in vals}
    tr = {f.name: vals[f.name] for f in _TRAIN_FIELDS if f.name in vals}
    tracker = TrackerConfig(**trk)
    cfg = Config(TrainConfig(**tr, tracker=tracker), vals.get("raw_eq1", False), vals.get("threads", 1))
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> Config:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_config(data)


# image helpers -------------------------------------------------------------

def read_rgb(path) -> np.ndarray:
    """8-bit RGB array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def read_binary_mask(path) -> np.ndarray:
    """Boolean road mask from a 0/255 single-channel PNG."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DecodeError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            arr = np.asarray(im)
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise DecodeError(f"{path}: binary mask holds values other than 0 and 255")
    return arr == 255


def write_binary_mask(mask, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def _draw_segment(img, p, q, color) -> None:
    h, w = img.shape[:2]
    n = int(np.ceil(np.max(np.abs(np.subtract(q, p))))) + 1
    t = np.linspace(0.0, 1.0, n)
    # (u, v) pixel coordinates with centres at half-integers
    x = np.floor(p[0] + t * (q[0] - p[0])).astype(int)
    y = np.floor(p[1] + t * (q[1] - p[1])).astype(int)
    ok = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    img[y[ok], x[ok]] = color


def overlay(frame, mask: PartialMask, pairs: Tracks | None = None, inconsistent=None) -> np.ndarray:
    """Tint ROAD green and NONROAD red, then draw tracked pairs as segments.

    ``inconsistent`` is an optional boolean flag per pair; flagged pairs are
    drawn in magenta and on top of the others (yellow). IGNORE pixels keep
    their original colour.
    """
    img = np.asarray(frame)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise SizeMismatch("frame must be an (H, W, 3) uint8 array")
    if img.shape[:2] != mask.labels.shape:
        raise SizeMismatch(f"frame {img.shape[1]}x{img.shape[0]} vs mask {mask.width}x{mask.height}")
    out = img.astype(np.float64)
    for sel, tint in ((mask.road, ROAD_TINT), (mask.nonroad, NONROAD_TINT)):
        out[sel] = (1.0 - TINT_ALPHA) * out[sel] + TINT_ALPHA * tint
    out = np.round(out).astype(np.uint8)
    if pairs is None or len(pairs) == 0:
        return out
    flags = np.zeros(len(pairs), dtype=bool) if inconsistent is None else np.asarray(inconsistent, dtype=bool)
    if len(flags) != len(pairs):
        raise SizeMismatch(f"{len(flags)} flags for {len(pairs)} pairs")
    for want in (False, True):
        color = INCONSISTENT_COLOR if want else PAIR_COLOR
        for i in np.flatnonzero(flags == want):
            _draw_segment(out, pairs.p[i], pairs.q[i], color)
    return out


# subcommands ---------------------------------------------------------------

def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise UsageError("--size must be positive")
    return w, h


def cmd_gen_mask(args) -> int:
    w, h = _parse_size(args.size)
    vehicle = VehicleParams(args.vehicle_width, args.overhang)
    rig = load_calibration(args.camera, w, h, raw_eq1=args.raw_eq1)
    mask = rasterize_partial_mask(rig, vehicle, w, h, args.near, args.far)
    save_mask(mask, args.out)
    c = mask.counts()
    log.info("road %d, nonroad %d, ignore %d pixels", c["road"], c["nonroad"], c["ignore"])
    return 0


def cmd_track(args) -> int:
    cfg = load_config(args.config)
    prev, nxt = read_rgb(args.prev), read_rgb(args.next)
    if prev.shape != nxt.shape:
        raise SizeMismatch(f"{args.prev} and {args.next} differ in size")
    tracks = track_frames(prev, nxt, cfg.tracker)
    Path(args.out).write_text(tracks.to_csv())
    log.info("%d tracked, %d valid", len(tracks), len(tracks.valid()))
    return 0


def cmd_synth_gen(args) -> int:
    from .synthworld import SceneSpec, write_dataset

    try:
        data = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc})") from exc
    spec = SceneSpec.from_json(data)
    write_dataset(spec, args.out)
    log.info("wrote %d frames to %s", spec.n_frames, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, {
        "seed": args.seed,
        "threads": args.threads,
        "raw_eq1": True if args.raw_eq1 else None,
        "symmetrize_joint": True if args.symmetrize_joint else None,
        "mine_every_epoch": True if args.mine_every_epoch else None,
        "mining_enabled": False if args.no_mining else None,
    })
    with _threads(cfg.threads):
        index = load_index(args.data, args.seq)
        frames = load_frames(index, cfg.train, raw_eq1=cfg.raw_eq1)
        result = train(frames, cfg.train, keep_phase1=bool(args.phase1_out))
    save_checkpoint(result.model, args.out)
    if args.phase1_out:
        save_checkpoint(result.phase1_model, args.phase1_out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    write_log(result.log, log_path)
    for r in result.reports:
        log.info("cycle %d: %d/%d inconsistent, %d trained", r.cycle, r.n_inconsistent, r.n_valid, r.n_hard)
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.model)
    paths = []
    for item in args.images:
        p = Path(item)
        paths.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
    if not paths:
        raise DecodeError("no input images")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _threads(args.threads):
        for p in paths:
            write_binary_mask(model.predict(read_rgb(p)), out / f"{p.stem}.png")
    return 0


def cmd_eval(args) -> int:
    gt_dir, pred_dir = Path(args.gt_dir), Path(args.pred_dir)
    gts = sorted(gt_dir.glob("*.png"))
    if not gts:
        raise DecodeError(f"no ground-truth masks in {gt_dir}")
    per_image: dict[str, EvalResult] = {}
    for g in gts:
        p = pred_dir / g.name
        if not p.exists():
            raise DecodeError(f"missing prediction {p}")
        per_image[g.stem] = iou(read_binary_mask(p), read_binary_mask(g))
    report = {
        "aggregate": aggregate(per_image.values()),
        "per_image": {k: v.to_json() for k, v in per_image.items()},
    }
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("road IoU %.4f over %d images", report["aggregate"]["iou_aggregate"], len(per_image))
    return 0


def cmd_overlay(args) -> int:
    frame = read_rgb(args.frame)
    mask = load_mask(args.mask)
    pairs = flags = None
    if args.pairs:
        pairs = Tracks.from_csv(Path(args.pairs).read_text())
    if args.model:
        if pairs is None or not args.next:
            raise UsageError("--model needs --pairs and --next")
        model = load_checkpoint(args.model)
        flags = inconsistent_flags(model(frame), model(read_rgb(args.next)), pairs)
    Image.fromarray(overlay(frame, mask, pairs, flags)).save(args.out)
    return 0


class _threads:
    """Cap native thread pools for the duration of a block."""

    def __init__(self, n: int):
        self.n = n

    def __enter__(self):
        from threadpoolctl import threadpool_limits

        self._ctl = threadpool_limits(limits=self.n)
        return self

    def __exit__(self, *exc):
        self._ctl.restore_original_limits()
        return False


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="geoseg", description="Unsupervised road segmentation from calibrated video.")
    ap.add_argument("--version", action="version", version=version_string())
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-mask", help="rasterize the geometric partial mask")
    p.add_argument("--camera", required=True, help="calibration JSON")
    p.add_argument("--vehicle-width", type=float, default=VehicleParams().car_width)
    p.add_argument("--overhang", type=float, default=VehicleParams().front_overhang)
    p.add_argument("--size", required=True, help="WxH")
    p.add_argument("--near", type=float, default=TrainConfig.quad_near)
    p.add_argument("--far", type=float, default=TrainConfig.quad_far)
    p.add_argument("--raw-eq1", action="store_true", help="skip the vehicle-to-camera axis permutation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_mask)

    p = sub.add_parser("track", help="detect and track corners between two frames")
    p.add_argument("--prev", required=True)
    p.add_argument("--next", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("synth-gen", help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--data", required=True)
    p.add_argument("--seq", help="frame directory name inside --data")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines log (default: <out>.log.jsonl)")
    p.add_argument("--phase1-out", help="also save the model as it was after phase 1")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--raw-eq1", action="store_true")
    p.add_argument("--symmetrize-joint", action="store_true")
    p.add_argument("--mine-every-epoch", action="store_true")
    p.add_argument("--no-mining", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write binary road masks")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("images", nargs="+", help="PNG files or directories")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="road IoU of predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="draw a mask and tracked pairs over a frame")
    p.add_argument("--frame", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--pairs")
    p.add_argument("--model", help="checkpoint used to flag inconsistent pairs")
    p.add_argument("--next", help="second frame of the pair, needed with --model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return ap


def version_string() -> str:
    return f"geoseg {__version__} (python {platform.python_version()}, numpy {np.__version__})"


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"geoseg: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    warnings.simplefilter("default")
    try:
        with _threads(1):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"geoseg: error: {exc}", file=sys.stderr)
        return 1
    except (GeosegError, OSError, ValueError) as exc:
        print(f"geoseg: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
