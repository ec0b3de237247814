"""Synthetic calibrated driving scenes with analytic ground truth.

A flat ground plane carries a straight road band ``|Y| <= road_half_width``
along world X. The camera rig drives forward along X; every pixel is shaded
by casting its ray into the scene (sky, optional box obstacles, ground), so
the road mask and the camera motion are known exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidSpec
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    VehicleParams,
    build_rig,
    calibration_to_json,
    pixel_rays,
)
from .weakmask import pixel_centers


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle standing on the ground, world coordinates (meters)."""

    x: float          # centre along the road
    y: float          # centre across the road
    length: float
    width: float
    height: float


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 128
    fx: float = 128.0
    fy: float = 128.0
    u0: float = 128.0
    v0: float = 64.0
    cam_x: float = 1.5
    cam_y: float = 0.0
    cam_z: float = 1.5
    roll: float = 0.0
    pitch: float = 0.15
    yaw: float = 0.0
    car_width: float = 1.8
    front_overhang: float = 2.0
    road_half_width: float = 3.5
    road_seed: int = 1
    offroad_seed: int = 2
    sky_seed: int = 3
    obstacles: tuple[Box, ...] = ()
    hedge_offset: float | None = 6.0      # lateral distance of roadside hedges, None for none
    hedge_height: float = 3.0
    haze_distance: float | None = 10.0    # e-folding distance of atmospheric haze
    speed: float = 5.0
    frame_rate: float = 30.0
    n_frames: int = 60
    speed_profile: tuple[float, ...] | None = None   # per-frame speed overrides
    supersample: int = 2                             # shading samples per pixel side

    def __post_init__(self):
        if not self.road_half_width > self.car_width / 2:
            raise InvalidSpec("road_half_width must exceed half the car width")
        if self.speed < 0 or (self.speed_profile and min(self.speed_profile) < 0):
            raise InvalidSpec("speed must be non-negative")
        if self.frame_rate <= 0 or self.n_frames < 1:
            raise InvalidSpec("frame_rate must be > 0 and n_frames >= 1")
        if self.speed_profile is not None and len(self.speed_profile) != self.n_frames:
            raise InvalidSpec("speed_profile must list one speed per frame")
        if self.hedge_offset is not None and not self.hedge_offset > self.road_half_width:
            raise InvalidSpec("hedge_offset must lie beyond the road edge")
        if self.supersample < 1:
            raise InvalidSpec("supersample must be >= 1")
        if self.width % 4 or self.height % 4:
            raise InvalidSpec("image size must be divisible by 4")
        try:
            self.rig
        except Exception as exc:
            raise InvalidSpec(f"invalid camera: {exc}") from exc

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.u0, self.v0, self.width, self.height)

    @property
    def extrinsics(self) -> CameraExtrinsics:
        return CameraExtrinsics(self.cam_x, self.cam_y, self.cam_z, self.roll, self.pitch, self.yaw)

    @property
    def rig(self) -> CameraRig:
        return build_rig(self.intrinsics, self.extrinsics)

    @property
    def vehicle(self) -> VehicleParams:
        return VehicleParams(self.car_width, self.front_overhang)

    def hedges(self) -> tuple[Box, ...]:
        if self.hedge_offset is None:
            return ()
        length = 1e5
        y = self.hedge_offset + 0.5
        return (Box(0.0, y, length, 1.0, self.hedge_height),
                Box(0.0, -y, length, 1.0, self.hedge_height))

    def speeds(self) -> np.ndarray:
        if self.speed_profile is not None:
            return np.asarray(self.speed_profile, dtype=float)
        return np.full(self.n_frames, float(self.speed))

    def offsets(self) -> np.ndarray:
        """Vehicle X position in the world for every frame."""
        step = self.speeds() / self.frame_rate
        return np.concatenate([[0.0], np.cumsum(step[:-1])])

    def to_json(self) -> dict:
        d = asdict(self)
        d["obstacles"] = [asdict(b) for b in self.obstacles]
        d["speed_profile"] = None if self.speed_profile is None else list(self.speed_profile)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown scene fields: {sorted(unknown)}")
        try:
            if "obstacles" in data:
                data["obstacles"] = tuple(Box(**b) for b in data["obstacles"])
            if data.get("speed_profile") is not None:
                data["speed_profile"] = tuple(float(s) for s in data["speed_profile"])
            return cls(**data)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc


# procedural textures ------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash01(ix, iy, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.int64).astype(np.uint64) * _M1
             ^ iy.astype(np.int64).astype(np.uint64) * _M2
             ^ np.uint64(seed & 0xFFFFFFFF) * _M3)
        h ^= h >> np.uint64(31)
        h *= _M2
        h ^= h >> np.uint64(29)
        h *= _M3
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(x, y, seed: int) -> np.ndarray:
    """Smooth value noise with unit lattice spacing, range [0, 1]."""
    fx, fy = np.floor(x), np.floor(y)
    tx, ty = x - fx, y - fy
    sx = tx * tx * (3 - 2 * tx)
    sy = ty * ty * (3 - 2 * ty)
    ix, iy = fx.astype(np.int64), fy.astype(np.int64)
    n00 = _hash01(ix, iy, seed)
    n10 = _hash01(ix + 1, iy, seed)
    n01 = _hash01(ix, iy + 1, seed)
    n11 = _hash01(ix + 1, iy + 1, seed)
    return (n00 * (1 - sx) + n10 * sx) * (1 - sy) + (n01 * (1 - sx) + n11 * sx) * sy


def fractal_noise(x, y, seed: int, base_scale: float, octaves: int = 3) -> np.ndarray:
    """Zero-mean octave sum in roughly [-0.5, 0.5]."""
    total = np.zeros(np.broadcast(x, y).shape)
    norm = 0.0
    scale, amp = base_scale, 1.0
    for k in range(octaves):
        n = value_noise(x / scale, y / scale, seed * 131 + k) - 0.5
        total += amp * n
        norm += amp
        scale *= 0.5
        amp *= 0.6
    return total / norm


ROAD_RGB = np.array([0.30, 0.30, 0.32])
OFFROAD_RGB = np.array([0.42, 0.50, 0.26])
SKY_RGB = np.array([0.62, 0.76, 0.95])
BOX_RGB = np.array([0.55, 0.25, 0.20])
HEDGE_RGB = np.array([0.30, 0.42, 0.20])
HAZE_RGB = np.array([0.70, 0.78, 0.88])


def _ray_box(origin, d, box: Box):
    """Entry distance of rays into a box, inf where missed."""
    lo = np.array([box.x - box.length / 2, box.y - box.width / 2, 0.0])
    hi = np.array([box.x + box.length / 2, box.y + box.width / 2, box.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmax > 0)
    return np.where(hit, np.maximum(tmin, 0.0), np.inf)


@dataclass
class _Hits:
    t_ground: np.ndarray
    t_box: np.ndarray
    box_index: np.ndarray
    X: np.ndarray
    Y: np.ndarray


def _cast(spec: SceneSpec, frame_index: int, u, v) -> tuple[np.ndarray, np.ndarray, _Hits]:
    rig = spec.rig
    d = pixel_rays(rig, u, v)
    origin = rig.center + np.array([spec.offsets()[frame_index], 0.0, 0.0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(d[..., 2] < 0, -origin[2] / d[..., 2], np.inf)
    t_box = np.full(t_ground.shape, np.inf)
    box_index = np.full(t_ground.shape, -1)
    for k, box in enumerate(spec.obstacles + spec.hedges()):
        tb = _ray_box(origin, d, box)
        closer = tb < t_box
        t_box = np.where(closer, tb, t_box)
        box_index = np.where(closer, k, box_index)
    tg = np.where(np.isfinite(t_ground), t_ground, 0.0)
    X = origin[0] + tg * d[..., 0]
    Y = origin[1] + tg * d[..., 1]
    return d, origin, _Hits(t_ground, t_box, box_index, X, Y)


def _road_from_hits(spec: SceneSpec, hits: _Hits) -> np.ndarray:
    ground_first = np.isfinite(hits.t_ground) & (hits.t_ground < hits.t_box)
    return ground_first & (np.abs(hits.Y) <= spec.road_half_width)


def exact_mask(spec: SceneSpec, frame_index: int) -> np.ndarray:
    """Boolean (H, W) ground truth: pixel-centre ray first hits the road band."""
    uu, vv = pixel_centers(spec.width, spec.height)
    _, _, hits = _cast(spec, frame_index, uu, vv)
    return _road_from_hits(spec, hits)


def _shade(spec: SceneSpec, frame_index: int, u, v) -> np.ndarray:
    """Scene colour along the rays through image points (u, v)."""
    d, origin, hits = _cast(spec, frame_index, u, v)
    road = _road_from_hits(spec, hits)
    ground = np.isfinite(hits.t_ground) & (hits.t_ground < hits.t_box)
    boxed = np.isfinite(hits.t_box) & ~ground
    sky = ~ground & ~boxed
    img = np.zeros(u.shape + (3,))

    X, Y = hits.X, hits.Y
    n_road = fractal_noise(X, Y, spec.road_seed, 0.8, 4)
    n_off = fractal_noise(X, Y, spec.offroad_seed, 1.2, 4)
    img[road] = ROAD_RGB + 0.5 * n_road[road][:, None]
    off = ground & ~road
    img[off] = OFFROAD_RGB + 0.6 * n_off[off][:, None] * np.array([1.0, 0.8, 0.6])

    # sky depends on direction only, so it shows no parallax
    az = np.arctan2(d[..., 1], d[..., 0])
    el = np.arcsin(np.clip(d[..., 2], -1, 1))
    n_sky = fractal_noise(az * 6.0, el * 6.0, spec.sky_seed, 0.5, 3)
    img[sky] = SKY_RGB + (0.25 * n_sky[sky] + 0.1 * el[sky])[:, None]

    if boxed.any():
        hit = origin + hits.t_box[boxed][:, None] * d[boxed]
        hedge = hits.box_index[boxed] >= len(spec.obstacles)
        n_box = fractal_noise(hit[:, 0] + hit[:, 1], hit[:, 2], 7, 0.3, 2)
        n_hedge = fractal_noise(hit[:, 0] + hit[:, 1], hit[:, 2], spec.offroad_seed + 17, 0.6, 3)
        img[boxed] = np.where(hedge[:, None],
                              HEDGE_RGB + 0.6 * n_hedge[:, None] * np.array([1.0, 0.8, 0.6]),
                              BOX_RGB + 0.4 * n_box[:, None])

    if spec.haze_distance:
        dist = np.where(ground, hits.t_ground, np.where(boxed, hits.t_box, 0.0))
        keep = np.exp(-dist / spec.haze_distance)[..., None]
        img = keep * img + (1.0 - keep) * HAZE_RGB
    return img


def render_frame(spec: SceneSpec, frame_index: int) -> tuple[np.ndarray, np.ndarray]:
    """RGB image (H, W, 3) in [0, 1] and its exact road mask.

    Each pixel averages ``supersample**2`` shading samples on a regular grid
    (box-filter anti-aliasing); the mask uses the pixel centre only.
    """
    if not 0 <= frame_index < spec.n_frames:
        raise InvalidSpec(f"frame {frame_index} outside 0..{spec.n_frames - 1}")
    n = spec.supersample
    uu, vv = pixel_centers(spec.width, spec.height)
    img = np.zeros((spec.height, spec.width, 3))
    for sy in range(n):
        for sx in range(n):
            du, dv = (sx + 0.5) / n - 0.5, (sy + 0.5) / n - 0.5
            img += _shade(spec, frame_index, uu + du, vv + dv)
    img /= n * n
    return np.clip(img, 0.0, 1.0), exact_mask(spec, frame_index)


def render_sequence(spec: SceneSpec):
    """Yield ``(index, rgb, gt_mask, speed)`` for every frame."""
    speeds = spec.speeds()
    for i in range(spec.n_frames):
        rgb, gt = render_frame(spec, i)
        yield i, rgb, gt, float(speeds[i])


def frame_id(i: int) -> str:
    return f"{i:06d}"


def to_uint8(rgb) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255.0).astype(np.uint8)


def write_dataset(spec: SceneSpec, out_dir, seq: str = "frames") -> Path:
    """Render the sequence into the on-disk dataset layout the trainer reads."""
    out = Path(out_dir)
    for sub in (seq, "camera", "vehicle", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    calib = calibration_to_json(spec.rig)
    calib_text = json.dumps(calib, indent=2, sort_keys=True)
    for i, rgb, gt, speed in render_sequence(spec):
        fid = frame_id(i)
        Image.fromarray(to_uint8(rgb)).save(out / seq / f"{fid}.png")
        Image.fromarray(np.where(gt, 255, 0).astype(np.uint8)).save(out / "gt" / f"{fid}.png")
        (out / "camera" / f"{fid}.json").write_text(calib_text)
        (out / "vehicle" / f"{fid}.json").write_text(json.dumps({"speed": speed}))
    (out / "scene.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))
    return out


def ground_flow(spec: SceneSpec, frame_a: int, frame_b: int, points) -> np.ndarray:
    """Where ground points seen at pixel ``points`` in ``frame_a`` appear in ``frame_b``.

    Uses the ground-plane homography induced by the known forward motion.
    Returns NaN rows for points that are not on the ground or go behind the camera.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rig = spec.rig
    d = pixel_rays(rig, pts[:, 0], pts[:, 1])
    offs = spec.offsets()
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d[:, 2] < 0, -rig.center[2] / d[:, 2], np.nan)
    world = rig.center + t[:, None] * d
    world[:, 0] += offs[frame_a] - offs[frame_b]
    h = world @ rig.projection[:, :3].T + rig.projection[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / h[:, 2:3]
    uv[~(h[:, 2] > 1e-9)] = np.nan
    return uv
