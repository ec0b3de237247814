"""Camera calibration, projection, horizon line and road quadrilateral.

Frames
------
Vehicle frame: origin on the ground below the rear-axle centre, X forward,
Y left, Z up (meters).

Camera frame: optical convention, x right, y down, z along the optical axis.

Image: continuous pixel coordinates (u, v); pixel column ``i`` / row ``j``
covers ``[i, i+1) x [j, j+1)`` so its centre is ``(i + 0.5, j + 0.5)``.

The extrinsic angles follow the usual driving-dataset convention: the
camera-to-vehicle rotation is ``Rz(yaw) Ry(pitch) Rx(roll)`` expressed in a
camera body frame that shares the vehicle axes (forward, left, up). The
vehicle-to-camera rotation is its transpose, followed by the fixed axis
permutation ``(x, y, z)_cam = (-Y, -Z, X)`` that turns the body frame into the
optical frame. With all angles zero the camera looks along vehicle X and the
horizon of a level camera falls on ``v = v0``. Positive pitch tilts the
optical axis down towards the ground. ``raw_eq1=True`` drops the permutation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CalibrationParseError,
    DegenerateHorizon,
    InvalidCalibration,
    QuadBehindCamera,
    Unprojectable,
)

EPS_W = 1e-9

# body frame (forward, left, up) -> optical frame (right, down, forward)
AXIS_PERMUTATION = np.array(
    [[0.0, -1.0, 0.0],
     [0.0, 0.0, -1.0],
     [1.0, 0.0, 0.0]]
)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    u0: float
    v0: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCalibration(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.u0 < self.image_width and 0 <= self.v0 < self.image_height):
            raise InvalidCalibration(
                f"principal point ({self.u0}, {self.v0}) outside "
                f"{self.image_width}x{self.image_height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.u0],
                         [0.0, self.fy, self.v0],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraExtrinsics:
    """Camera pose in the vehicle frame (meters, radians)."""

    x: float
    y: float
    z: float
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not self.z > 0:
            raise InvalidCalibration(f"camera height z must be > 0, got {self.z}")
        if abs(self.roll) >= math.pi / 2 or abs(self.pitch) >= math.pi / 2:
            raise InvalidCalibration("|roll| and |pitch| must be below pi/2")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    car_width: float = 1.8
    front_overhang: float = 2.0   # rear axle to front bumper

    def __post_init__(self):
        if not self.car_width > 0:
            raise InvalidCalibration("car_width must be > 0")
        if not self.front_overhang >= 0:
            raise InvalidCalibration("front_overhang must be >= 0")


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    rotation: np.ndarray = field(repr=False)
    translation: np.ndarray = field(repr=False)
    projection: np.ndarray = field(repr=False)
    raw_eq1: bool = False

    @property
    def width(self) -> int:
        return self.intrinsics.image_width

    @property
    def height(self) -> int:
        return self.intrinsics.image_height

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.position


@dataclass(frozen=True)
class ImageLine:
    """Line ``a*u + b*v + c = 0`` with ``a**2 + b**2 == 1``."""

    a: float
    b: float
    c: float

    def evaluate(self, u, v):
        return self.a * np.asarray(u, dtype=float) + self.b * np.asarray(v, dtype=float) + self.c

    def v_at(self, u: float) -> float:
        return -(self.a * u + self.c) / self.b


@dataclass(frozen=True)
class ImageQuad:
    """Road quadrilateral vertices ordered near-left, near-right, far-right, far-left."""

    vertices: np.ndarray   # (4, 2) of (u, v)

    @property
    def near_left(self):
        return self.vertices[0]

    @property
    def near_right(self):
        return self.vertices[1]

    @property
    def far_right(self):
        return self.vertices[2]

    @property
    def far_left(self):
        return self.vertices[3]


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_rpy(roll: float, pitch: float, yaw: float, raw_eq1: bool = False) -> np.ndarray:
    """Vehicle-to-camera rotation for the given roll, pitch and yaw (radians).

    Returns ``M @ (Rz(yaw) Ry(pitch) Rx(roll)).T`` where ``M`` is
    ``AXIS_PERMUTATION``; with ``raw_eq1`` the permutation is omitted.
    """
    r = (_rz(yaw) @ _ry(pitch) @ _rx(roll)).T
    if raw_eq1:
        return r
    return AXIS_PERMUTATION @ r


def build_rig(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics, raw_eq1: bool = False) -> CameraRig:
    if not extrinsics.z > 0:
        raise InvalidCalibration(f"camera height z must be > 0, got {extrinsics.z}")
    rotation = rotation_from_rpy(extrinsics.roll, extrinsics.pitch, extrinsics.yaw, raw_eq1=raw_eq1)
    translation = -rotation @ extrinsics.position
    projection = intrinsics.K @ np.hstack([rotation, translation[:, None]])
    for arr in (rotation, translation, projection):
        arr.setflags(write=False)
    return CameraRig(intrinsics, extrinsics, rotation, translation, projection, raw_eq1)


def project_homogeneous(rig: CameraRig, points) -> np.ndarray:
    """Project (..., 3) vehicle points to (..., 3) homogeneous image points."""
    pts = np.asarray(points, dtype=float)
    return pts @ rig.projection[:, :3].T + rig.projection[:, 3]


def project_point(rig: CameraRig, point) -> tuple[float, float]:
    """Pixel coordinates of a vehicle-frame point.

    The result may fall outside the image. Raises ``Unprojectable`` when the
    point is at or behind the camera plane.
    """
    h = project_homogeneous(rig, point)
    if not h[2] > EPS_W:
        raise Unprojectable(f"point {tuple(np.asarray(point, float))} has depth {h[2]:.3g}")
    return float(h[0] / h[2]), float(h[1] / h[2])


def project_points(rig: CameraRig, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(uv, ok)``; ``uv`` is NaN where not ok."""
    h = project_homogeneous(rig, points)
    ok = h[..., 2] > EPS_W
    w = np.where(ok, h[..., 2], np.nan)
    uv = h[..., :2] / w[..., None]
    return uv, ok


def normalize_line(l) -> ImageLine:
    a, b, c = (float(x) for x in l)
    n = math.hypot(a, b)
    a, b, c = a / n, b / n, c / n
    if b < 0 or (b == 0 and a < 0):
        a, b, c = -a, -b, -c
    return ImageLine(a, b, c)


def horizon_line(rig: CameraRig) -> ImageLine:
    """Image of the ground plane's line at infinity."""
    h1 = rig.projection[:, 0]   # direction (1, 0, 0, 0)
    h2 = rig.projection[:, 1]   # direction (0, 1, 0, 0)
    l = np.cross(h1, h2)
    scale = np.linalg.norm(h1) * np.linalg.norm(h2)
    if math.hypot(l[0], l[1]) <= 1e-12 * scale:
        raise DegenerateHorizon("vanishing points coincide or the horizon is at infinity")
    return normalize_line(l)


def ground_side_sign(rig: CameraRig, line: ImageLine | None = None) -> float:
    """Sign of ``line.evaluate`` on the ground (below-horizon) side of the image."""
    line = line or horizon_line(rig)
    # look along the optical axis projected onto the ground plane
    forward = rig.rotation.T @ np.array([0.0, 0.0, 1.0])
    fwd = np.array([forward[0], forward[1], 0.0])
    if np.linalg.norm(fwd) < 1e-9:
        fwd = np.array([1.0, 0.0, 0.0])
    fwd /= np.linalg.norm(fwd)
    probe = rig.center + 1e3 * fwd
    probe[2] = 0.0
    u, v = project_point(rig, probe)
    s = line.evaluate(u, v)
    return 1.0 if s > 0 else -1.0


def road_quadrilateral(rig: CameraRig, vehicle: VehicleParams, near: float = 2.0, far: float = 5.0) -> ImageQuad:
    """Projection of the ground rectangle ``near``..``far`` meters ahead of the front bumper."""
    if not near < far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    A, hw = vehicle.front_overhang, vehicle.car_width / 2
    corners = np.array([
        [A + near, +hw, 0.0],   # near-left
        [A + near, -hw, 0.0],   # near-right
        [A + far, -hw, 0.0],    # far-right
        [A + far, +hw, 0.0],    # far-left
    ])
    uv, ok = project_points(rig, corners)
    if not ok.all():
        raise QuadBehindCamera(f"road corners {corners[~ok].tolist()} are behind the camera")
    return ImageQuad(uv)


def ground_homography(rig: CameraRig) -> np.ndarray:
    """3x3 map from ground-plane points ``(X, Y, 1)`` to homogeneous pixels."""
    return rig.projection[:, [0, 1, 3]].copy()


def pixel_rays(rig: CameraRig, u, v) -> np.ndarray:
    """Unit viewing directions in the vehicle frame for pixel coordinates (u, v)."""
    K = rig.intrinsics
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d_cam = np.stack([(u - K.u0) / K.fx, (v - K.v0) / K.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ rig.rotation   # R^T applied row-wise
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


_INTRINSIC_KEYS = ("fx", "fy", "u0", "v0")
_EXTRINSIC_KEYS = ("x", "y", "z", "roll", "pitch", "yaw")


def parse_calibration(data: dict | str | bytes, width: int, height: int, raw_eq1: bool = False) -> CameraRig:
    """Build a rig from a Cityscapes-style camera JSON document.

    ``data`` is either the decoded object or the raw JSON text. Unknown keys
    are ignored; a missing key raises ``CalibrationParseError`` naming it.
    """
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise CalibrationParseError(f"invalid calibration JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CalibrationParseError("calibration JSON must be an object")

    def section(name, keys):
        sec = data.get(name)
        if not isinstance(sec, dict):
            raise CalibrationParseError(f"missing key '{name}'")
        out = {}
        for k in keys:
            if k not in sec:
                raise CalibrationParseError(f"missing key '{name}.{k}'")
            try:
                out[k] = float(sec[k])
            except (TypeError, ValueError) as exc:
                raise CalibrationParseError(f"key '{name}.{k}' is not a number") from exc
        return out

    intr = section("intrinsic", _INTRINSIC_KEYS)
    extr = section("extrinsic", _EXTRINSIC_KEYS)
    intrinsics = CameraIntrinsics(image_width=int(width), image_height=int(height), **intr)
    return build_rig(intrinsics, CameraExtrinsics(**extr), raw_eq1=raw_eq1)


def load_calibration(path, width: int, height: int, raw_eq1: bool = False) -> CameraRig:
    return parse_calibration(Path(path).read_text(), width, height, raw_eq1=raw_eq1)


def calibration_to_json(rig: CameraRig) -> dict:
    i, e = rig.intrinsics, rig.extrinsics
    return {
        "intrinsic": {"fx": i.fx, "fy": i.fy, "u0": i.u0, "v0": i.v0},
        "extrinsic": {"x": e.x, "y": e.y, "z": e.z, "roll": e.roll, "pitch": e.pitch, "yaw": e.yaw},
    }
