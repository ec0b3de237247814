"""Two-phase training: geometric warm-up, then tracked-pair refinement with mining.

Phase 1 fits the geometric loss on single frames. Phase 2 runs refinement
cycles over frame pairs ``(i, i + k)``: at the start of each cycle the current
model flags tracked point pairs whose hard labels disagree, and the cycle's
epochs minimise the combined loss using only those pairs (or every valid pair
when mining is off or nothing disagrees).

Every epoch shuffles its work list with ``numpy.random.default_rng((seed,
stream, epoch))``, so runs are bitwise reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, NoPairs
from .geometry import CameraRig, VehicleParams, load_calibration
from .losses import final_loss, geometric_loss
from .metrics import inconsistent_flags
from .net import SegNet, backward, forward
from .tracker import TrackerConfig, Tracks, track_frames
from .weakmask import PartialMask, rasterize_partial_mask

log = logging.getLogger(__name__)

RESERVED_DIRS = {"camera", "vehicle", "gt", "pred"}
PHASE1_STREAM = 1
PHASE2_STREAM = 2


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    image_path: Path
    calibration_path: Path
    speed: float | None = None


@dataclass
class SequenceIndex:
    frames: list[FrameRecord]
    root: Path | None = None

    def __len__(self):
        return len(self.frames)

    def __post_init__(self):
        for f in self.frames:
            if f.speed is not None and f.speed < 0:
                raise ValueError(f"frame {f.frame_id} has negative speed")


def load_index(data_dir, seq: str | None = None) -> SequenceIndex:
    """Index ``<data>/<seq>/<id>.png`` with sibling ``camera/`` and ``vehicle/`` JSON."""
    root = Path(data_dir)
    if seq is None:
        cands = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name not in RESERVED_DIRS)
        if len(cands) != 1:
            raise FileNotFoundError(f"expected one frame directory in {root}, found {cands}")
        seq = cands[0]
    frames = []
    for img in sorted((root / seq).glob("*.png")):
        fid = img.stem
        cam = root / "camera" / f"{fid}.json"
        if not cam.exists():
            raise FileNotFoundError(f"missing calibration {cam}")
        speed = None
        veh = root / "vehicle" / f"{fid}.json"
        if veh.exists():
            speed = float(json.loads(veh.read_text())["speed"])
        frames.append(FrameRecord(fid, img, cam, speed))
    return SequenceIndex(frames, root)


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 100
    cycles: int = 10
    epochs_per_cycle: int = 100
    pair_interval: int = 5
    speed_threshold: float = 2.0
    lr: float = 1e-4
    seed: int = 0
    consistency_weight: float = 1.0
    mining_enabled: bool = True
    mine_every_epoch: bool = False
    symmetrize_joint: bool = False
    early_stop_fraction: float = 0.01
    early_stop_cycles: int = 2
    car_width: float = 1.8
    front_overhang: float = 2.0
    quad_near: float = 2.0
    quad_far: float = 5.0
    tracker: TrackerConfig = field(default_factory=TrackerConfig)

    def __post_init__(self):
        for name in ("phase1_epochs", "cycles", "epochs_per_cycle"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.pair_interval < 1:
            raise ConfigError("pair_interval must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.speed_threshold < 0:
            raise ConfigError("speed_threshold must be >= 0")
        if self.consistency_weight < 0:
            raise ConfigError("consistency_weight must be >= 0")
        if not self.quad_near < self.quad_far:
            raise ConfigError("quad_near must be < quad_far")

    @property
    def vehicle(self) -> VehicleParams:
        return VehicleParams(self.car_width, self.front_overhang)


@dataclass
class Frame:
    """A decoded training frame."""

    frame_id: str
    image: np.ndarray          # (H, W, 3) float in [0, 1]
    rig: CameraRig | None
    mask: PartialMask | None
    speed: float | None = None


def load_frames(index: SequenceIndex, cfg: TrainConfig, raw_eq1: bool = False) -> list[Frame]:
    frames = []
    for rec in index.frames:
        img = np.asarray(Image.open(rec.image_path).convert("RGB"), dtype=np.float64) / 255.0
        h, w = img.shape[:2]
        rig = load_calibration(rec.calibration_path, w, h, raw_eq1=raw_eq1)
        mask = rasterize_partial_mask(rig, cfg.vehicle, w, h, cfg.quad_near, cfg.quad_far)
        frames.append(Frame(rec.frame_id, img, rig, mask, rec.speed))
    return frames


def _speed_ok(speed, threshold) -> bool:
    return speed is None or speed >= threshold


def select_pairs(index: Sequence, cfg: TrainConfig) -> list[tuple[int, int]]:
    """Pairs ``(i, i + k)`` for ``i % k == 0`` whose frames both move fast enough.

    ``index`` is a SequenceIndex or a list of objects with a ``speed`` attribute.
    Frames without a speed are kept; a warning reports how many pairs that affected.
    """
    frames = index.frames if isinstance(index, SequenceIndex) else list(index)
    k = cfg.pair_interval
    pairs, unknown = [], 0
    for i in range(0, len(frames) - k, k):
        a, b = frames[i].speed, frames[i + k].speed
        if a is None or b is None:
            unknown += 1
        if _speed_ok(a, cfg.speed_threshold) and _speed_ok(b, cfg.speed_threshold):
            pairs.append((i, i + k))
    if unknown:
        warnings.warn(f"{unknown} frame pair(s) have no speed record and were kept", stacklevel=2)
    return pairs


def phase1_frames(frames: Sequence[Frame], cfg: TrainConfig) -> list[int]:
    """Indices of frames fast enough for their road quadrilateral to be trusted."""
    return [i for i, f in enumerate(frames) if _speed_ok(f.speed, cfg.speed_threshold)]


@dataclass
class MiningReport:
    cycle: int
    n_tracked: int
    n_valid: int
    n_inconsistent: int
    n_hard: int          # pairs fed to the consistency loss per epoch

    def __post_init__(self):
        assert self.n_inconsistent <= self.n_valid <= self.n_tracked
        assert self.n_hard <= self.n_valid

    @property
    def inconsistent_fraction(self) -> float:
        return self.n_inconsistent / self.n_valid if self.n_valid else 0.0


def _epoch_order(seed: int, stream: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, stream, epoch)).permutation(n)


def _group_step(model: SegNet, frames: Sequence[Frame], group: tuple[int, ...],
                pts=None, pts_prime=None, cfg: TrainConfig | None = None) -> float:
    """One Adam step on a single frame or a frame pair; returns the loss value."""
    if len(group) == 1:
        f = frames[group[0]]
        y, cache = forward(model.params, f.image, return_cache=True)
        value, g = geometric_loss(y, f.mask)
        model.step(backward(model.params, f.image, g, cache=cache))
        return value
    fa, fb = frames[group[0]], frames[group[1]]
    ya, ca = forward(model.params, fa.image, return_cache=True)
    yb, cb = forward(model.params, fb.image, return_cache=True)
    weight = 1.0 if cfg is None else cfg.consistency_weight
    sym = False if cfg is None else cfg.symmetrize_joint
    res = final_loss(ya, yb, fa.mask, fb.mask, pts, pts_prime, weight, sym)
    ga = backward(model.params, fa.image, res.grad, cache=ca)
    gb = backward(model.params, fb.image, res.grad_prime, cache=cb)
    model.step({k: ga[k] + gb[k] for k in ga})
    return res.value


def train_geometric(model: SegNet, frames: Sequence[Frame], groups: Sequence[tuple[int, ...]],
                    epochs: int, seed: int, stream: int = PHASE1_STREAM, phase: int = 1,
                    on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Geometric-loss-only training over frame groups (singletons or pairs)."""
    records = []
    for epoch in range(epochs):
        order = _epoch_order(seed, stream, epoch, len(groups))
        losses = [_group_step(model, frames, tuple(groups[j])) for j in order]
        rec = {"phase": phase, "cycle": 0, "epoch": epoch, "loss": float(np.mean(losses)),
               "n_pairs": 0, "n_inconsistent": 0}
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
    return records


def train_phase1(model: SegNet, frames: Sequence[Frame], cfg: TrainConfig,
                 on_epoch: Callable[[dict], None] | None = None) -> tuple[SegNet, list[dict]]:
    """``cfg.phase1_epochs`` epochs of geometric training, one frame per step."""
    if cfg.phase1_epochs == 0:
        return model, []
    model.adam.lr = cfg.lr
    groups = [(i,) for i in phase1_frames(frames, cfg)]
    if not groups:
        raise NoPairs("no frame passes the speed filter")
    return model, train_geometric(model, frames, groups, cfg.phase1_epochs, cfg.seed,
                                  PHASE1_STREAM, 1, on_epoch)


def track_pairs(frames: Sequence[Frame], pairs: Sequence[tuple[int, int]], cfg: TrainConfig) -> list[Tracks]:
    """Valid, forward-backward-checked correspondences for every frame pair."""
    return [track_frames(frames[a].image, frames[b].image, cfg.tracker) for a, b in pairs]


def mine_inconsistent(model, pair, tracked: Tracks) -> Tracks:
    """Subset of ``tracked`` whose hard labels differ between the two frames.

    ``model`` maps an image to a logit map; ``pair`` holds the two images.
    """
    if len(tracked) == 0:
        return tracked
    flags = inconsistent_flags(model(pair[0]), model(pair[1]), tracked)
    return tracked[flags]


def _mine_all(model: SegNet, frames, pairs, tracks: Sequence[Tracks], cache: dict) -> list[Tracks]:
    """Hard subset for every frame pair, reusing logits per frame within one call."""
    def logits(i):
        if i not in cache:
            cache[i] = forward(model.params, frames[i].image)
        return cache[i]

    out = []
    for (a, b), tr in zip(pairs, tracks):
        if len(tr) == 0:
            out.append(tr)
            continue
        out.append(tr[inconsistent_flags(logits(a), logits(b), tr)])
    return out


def train_phase2(model: SegNet, frames: Sequence[Frame], cfg: TrainConfig,
                 pairs: Sequence[tuple[int, int]] | None = None,
                 tracks: Sequence[Tracks] | None = None,
                 on_epoch: Callable[[dict], None] | None = None,
                 ) -> tuple[SegNet, list[MiningReport], list[dict]]:
    """Refinement cycles with the combined loss on tracked pairs.

    ``pairs`` defaults to :func:`select_pairs` over ``frames``; ``tracks``
    (one VALID-only Tracks per pair) are computed when not supplied. The
    image content does not change between cycles, so tracking runs once and
    only the mining step is repeated.
    """
    if cfg.cycles == 0:
        return model, [], []
    model.adam.lr = cfg.lr
    pairs = list(select_pairs(frames, cfg) if pairs is None else pairs)
    if not pairs:
        raise NoPairs("no frame pair passes the interval and speed rules")
    if tracks is None:
        tracks = track_pairs(frames, pairs, cfg)
    valid = [t.valid() for t in tracks]
    n_tracked = sum(len(t) for t in tracks)
    n_valid = sum(len(t) for t in valid)

    reports: list[MiningReport] = []
    records: list[dict] = []
    quiet = 0
    for cycle in range(cfg.cycles):
        hard = _mine_all(model, frames, pairs, valid, {})
        n_incons = sum(len(h) for h in hard)
        active = _active_sets(hard, valid, cfg)
        report = MiningReport(cycle, n_tracked, n_valid, n_incons, sum(len(a) for a in active))
        reports.append(report)
        log.info("cycle %d: %d/%d inconsistent, training on %d pairs",
                 cycle, n_incons, n_valid, report.n_hard)

        quiet = quiet + 1 if report.inconsistent_fraction < cfg.early_stop_fraction else 0
        if quiet >= cfg.early_stop_cycles:
            log.info("early stop: inconsistency below %.1f%% for %d cycles",
                     100 * cfg.early_stop_fraction, quiet)
            break

        for epoch in range(cfg.epochs_per_cycle):
            if epoch and cfg.mining_enabled and cfg.mine_every_epoch:
                hard = _mine_all(model, frames, pairs, valid, {})
                n_incons = sum(len(h) for h in hard)
                active = _active_sets(hard, valid, cfg)
            global_epoch = cycle * cfg.epochs_per_cycle + epoch
            order = _epoch_order(cfg.seed, PHASE2_STREAM, global_epoch, len(pairs))
            losses = []
            for j in order:
                pts = active[j]
                losses.append(_group_step(model, frames, pairs[j], pts.p, pts.q, cfg))
            rec = {"phase": 2, "cycle": cycle, "epoch": epoch, "loss": float(np.mean(losses)),
                   "n_pairs": int(sum(len(a) for a in active)), "n_inconsistent": int(n_incons)}
            records.append(rec)
            if on_epoch:
                on_epoch(rec)
    return model, reports, records


def _active_sets(hard: list[Tracks], valid: list[Tracks], cfg: TrainConfig) -> list[Tracks]:
    """Pairs that feed the consistency loss, per frame pair."""
    if not cfg.mining_enabled:
        return valid
    # an empty hard set falls back to every valid pair
    return [h if len(h) else v for h, v in zip(hard, valid)]


@dataclass
class TrainResult:
    model: SegNet
    log: list[dict]
    reports: list[MiningReport]
    phase1_model: SegNet | None = None


def train(frames: Sequence[Frame], cfg: TrainConfig, model: SegNet | None = None,
          keep_phase1: bool = False, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Full two-phase run from a freshly initialised (or supplied) model."""
    model = model or SegNet(seed=cfg.seed, lr=cfg.lr)
    model, log1 = train_phase1(model, frames, cfg, on_epoch)
    snapshot = model.copy() if keep_phase1 else None
    model, reports, log2 = train_phase2(model, frames, cfg, on_epoch=on_epoch)
    return TrainResult(model, log1 + log2, reports, snapshot)


def write_log(records: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def config_to_json(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def config_from_json(data: dict) -> TrainConfig:
    data = dict(data)
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
    if "tracker" in data and isinstance(data["tracker"], dict):
        data["tracker"] = TrackerConfig(**data["tracker"])
    return TrainConfig(**data)
