"""Ternary partial masks rasterized from the horizon line and road quadrilateral."""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from PIL import Image

from .errors import DecodeError, EmptyRegion
from .geometry import (
    CameraRig,
    VehicleParams,
    ground_side_sign,
    horizon_line,
    road_quadrilateral,
)


class Label(IntEnum):
    """Label codes double as the 8-bit PNG gray values."""

    NONROAD = 0
    IGNORE = 128
    ROAD = 255


ROAD, NONROAD, IGNORE = Label.ROAD, Label.NONROAD, Label.IGNORE
_ALPHABET = np.array([NONROAD, IGNORE, ROAD], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class PartialMask:
    labels: np.ndarray   # (height, width) uint8 with values in Label

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.dtype != np.uint8:
            raise ValueError("labels must be a 2-D uint8 array")
        if not np.isin(lab, _ALPHABET).all():
            raise ValueError("labels contain values outside {0, 128, 255}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def road(self) -> np.ndarray:
        return self.labels == ROAD

    @property
    def nonroad(self) -> np.ndarray:
        return self.labels == NONROAD

    @property
    def ignore(self) -> np.ndarray:
        return self.labels == IGNORE

    def counts(self) -> dict[str, int]:
        return {"road": int(self.road.sum()), "nonroad": int(self.nonroad.sum()),
                "ignore": int(self.ignore.sum())}

    def __eq__(self, other):
        if not isinstance(other, PartialMask):
            return NotImplemented
        return self.labels.shape == other.labels.shape and bool(np.array_equal(self.labels, other.labels))

    __hash__ = None


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(width, dtype=float) + 0.5
    v = np.arange(height, dtype=float) + 0.5
    return np.meshgrid(u, v)


def points_in_polygon(u, v, vertices) -> np.ndarray:
    """Even-odd test with the top-left ownership rule.

    Points on a left or top edge count as inside, points on a right or
    bottom edge as outside.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    verts = np.asarray(vertices, dtype=float)
    inside = np.zeros(np.broadcast(u, v).shape, dtype=bool)
    n = len(verts)
    for k in range(n):
        x1, y1 = verts[k]
        x2, y2 = verts[(k + 1) % n]
        straddle = (y1 > v) != (y2 > v)
        if not straddle.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (u < x_cross)
    return inside


def rasterize_partial_mask(rig: CameraRig, vehicle: VehicleParams, width: int | None = None,
                           height: int | None = None, near: float = 2.0, far: float = 5.0) -> PartialMask:
    """Label pixel centres above the horizon NONROAD and inside the road quad ROAD."""
    width = rig.width if width is None else int(width)
    height = rig.height if height is None else int(height)
    line = horizon_line(rig)
    sign = ground_side_sign(rig, line)
    quad = road_quadrilateral(rig, vehicle, near, far)

    uu, vv = pixel_centers(width, height)
    above = sign * line.evaluate(uu, vv) < 0
    inside = points_in_polygon(uu, vv, quad.vertices) & ~above

    labels = np.full((height, width), IGNORE, dtype=np.uint8)
    labels[above] = NONROAD
    labels[inside] = ROAD
    mask = PartialMask(labels)
    c = mask.counts()
    if c["road"] == 0:
        raise EmptyRegion("road quadrilateral covers no pixel centres")
    if c["nonroad"] == 0:
        raise EmptyRegion("no pixel centre lies above the horizon")
    return mask


def mask_to_png(mask: PartialMask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(mask.labels)).save(buf, format="PNG")
    return buf.getvalue()


def png_to_mask(data: bytes) -> PartialMask:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise DecodeError(f"cannot decode mask PNG: {exc}") from exc
    if img.mode != "L":
        raise DecodeError(f"mask PNG must be 8-bit grayscale, got mode {img.mode}")
    labels = np.array(img, dtype=np.uint8)
    bad = ~np.isin(labels, _ALPHABET)
    if bad.any():
        raise DecodeError(f"mask PNG contains value {int(labels[bad][0])} outside {{0, 128, 255}}")
    return PartialMask(labels)


def save_mask(mask: PartialMask, path) -> None:
    with open(path, "wb") as f:
        f.write(mask_to_png(mask))


def load_mask(path) -> PartialMask:
    with open(path, "rb") as f:
        return png_to_mask(f.read())
