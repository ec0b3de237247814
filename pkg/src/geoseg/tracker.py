"""Shi-Tomasi corners and pyramidal Lucas-Kanade tracking.

Point coordinates use the package-wide continuous pixel convention: the centre
of array element ``img[j, i]`` sits at ``(u, v) = (i + 0.5, j + 0.5)``.
Internally everything works in array coordinates ``(x, y) = (u - 0.5, v - 0.5)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, ImageTooSmall, SizeMismatch

SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0])
SOBEL_DIFF = np.array([-1.0, 0.0, 1.0])
PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class Status(IntEnum):
    VALID = 0
    DIVERGED = 1
    OUT_OF_BOUNDS = 2
    FB_REJECTED = 3


@dataclass(frozen=True)
class Corner:
    u: float
    v: float
    score: float

    @property
    def position(self) -> tuple[float, float]:
        return (self.u, self.v)


class TrackedPair(NamedTuple):
    p: tuple[float, float]
    q: tuple[float, float]
    status: Status


@dataclass(eq=False)
class Tracks:
    """A batch of correspondences ``p -> q`` stored as arrays."""

    p: np.ndarray        # (n, 2) (u, v) in the first frame
    q: np.ndarray        # (n, 2) (u, v) in the second frame
    status: np.ndarray   # (n,) int, values of Status

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 2)
        self.status = np.asarray(self.status, dtype=np.int8).reshape(-1)
        if not (len(self.p) == len(self.q) == len(self.status)):
            raise ValueError("p, q and status must have equal length")

    def __len__(self):
        return len(self.status)

    def __iter__(self) -> Iterator[TrackedPair]:
        for p, q, s in zip(self.p, self.q, self.status):
            yield TrackedPair((float(p[0]), float(p[1])), (float(q[0]), float(q[1])), Status(int(s)))

    def __getitem__(self, idx) -> "Tracks":
        idx = np.asarray(idx) if not isinstance(idx, slice) else idx
        return Tracks(self.p[idx], self.q[idx], self.status[idx])

    @property
    def is_valid(self) -> np.ndarray:
        return self.status == Status.VALID

    def valid(self) -> "Tracks":
        return self[self.is_valid]

    @classmethod
    def empty(cls) -> "Tracks":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int8))

    @classmethod
    def from_pairs(cls, pairs) -> "Tracks":
        pairs = list(pairs)
        if not pairs:
            return cls.empty()
        return cls([t.p for t in pairs], [t.q for t in pairs], [int(t.status) for t in pairs])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pu", "pv", "qu", "qv", "status"])
        for p, q, s in zip(self.p, self.q, self.status):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(q[0])), repr(float(q[1])),
                        Status(int(s)).name])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Tracks":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            return cls.empty()
        p = [(float(r["pu"]), float(r["pv"])) for r in rows]
        q = [(float(r["qu"]), float(r["qv"])) for r in rows]
        s = [Status[r["status"].strip()] for r in rows]
        return cls(p, q, s)


def to_gray(image) -> np.ndarray:
    """Float grayscale in [0, 1] from a (H, W) or (H, W, 3) array (uint8 or float)."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(float) / 255.0
    else:
        img = img.astype(float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-channel image, got shape {img.shape}")
    return img


def _correlate_sep(img, ky, kx):
    """Separable correlation with reflect-101 borders."""
    ry, rx = len(ky) // 2, len(kx) // 2
    pad = np.pad(img, ((ry, ry), (rx, rx)), mode="reflect")
    h, w = img.shape
    tmp = sum(k * pad[i:i + h, :] for i, k in enumerate(ky))
    return sum(k * tmp[:, i:i + w] for i, k in enumerate(kx))


def sobel(img):
    """3x3 Sobel derivatives (d/dx, d/dy), unnormalised, reflect-101 borders."""
    img = np.asarray(img, dtype=float)
    gx = _correlate_sep(img, SOBEL_SMOOTH, SOBEL_DIFF)
    gy = _correlate_sep(img, SOBEL_DIFF, SOBEL_SMOOTH)
    return gx, gy


def min_eigenvalue_map(img, block_size: int = 7) -> np.ndarray:
    """Smaller eigenvalue of the windowed structure tensor at every pixel."""
    gx, gy = sobel(img)
    box = np.ones(block_size)
    a = _correlate_sep(gx * gx, box, box)
    b = _correlate_sep(gx * gy, box, box)
    c = _correlate_sep(gy * gy, box, box)
    half_diff = 0.5 * (a - c)
    lam = 0.5 * (a + c) - np.sqrt(half_diff * half_diff + b * b)
    return np.maximum(lam, 0.0)


def shi_tomasi(image, max_corners: int = 500, quality_level: float = 0.01,
               min_distance: float = 10.0, block_size: int = 7) -> list[Corner]:
    """Strongest local maxima of the min-eigenvalue map, sorted by score."""
    img = to_gray(image)
    if img.shape[0] < block_size or img.shape[1] < block_size:
        raise ImageTooSmall(f"image {img.shape[1]}x{img.shape[0]} smaller than {block_size}x{block_size} window")
    if not 0 < quality_level <= 1:
        raise ValueError("quality_level must be in (0, 1]")

    score = min_eigenvalue_map(img, block_size)
    top = score.max()
    if top <= 0:
        return []
    padded = np.pad(score, 1, mode="constant", constant_values=-np.inf)
    h, w = score.shape
    neigh = np.max([padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=0)
    cand = (score >= neigh) & (score >= quality_level * top) & (score > 0)
    ys, xs = np.nonzero(cand)
    vals = score[ys, xs]
    order = np.argsort(-vals, kind="stable")
    ys, xs, vals = ys[order], xs[order], vals[order]

    kept: list[int] = []
    kx = np.empty(max_corners)
    ky = np.empty(max_corners)
    d2 = min_distance * min_distance
    for i in range(len(vals)):
        if len(kept) >= max_corners:
            break
        n = len(kept)
        if n and np.min((kx[:n] - xs[i]) ** 2 + (ky[:n] - ys[i]) ** 2) < d2:
            continue
        kx[n], ky[n] = xs[i], ys[i]
        kept.append(i)
    return [Corner(float(xs[i]) + 0.5, float(ys[i]) + 0.5, float(vals[i])) for i in kept]


def pyramid_down(img) -> np.ndarray:
    return _correlate_sep(img, PYR_KERNEL, PYR_KERNEL)[::2, ::2]


def build_pyramid(img, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(img, dtype=float)]
    for _ in range(levels):
        if min(pyr[-1].shape) < 2:
            break
        pyr.append(pyramid_down(pyr[-1]))
    return pyr


def bilinear_sample(img, x, y) -> np.ndarray:
    """Sample ``img`` at array coordinates with border clamping."""
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def lk_track(prev, next, points, levels: int = 3, window: int = 21, max_iter: int = 30,
             eps: float = 0.01, min_eig: float = 1e-7) -> Tracks:
    """Track ``points`` ((n, 2) of (u, v)) from ``prev`` into ``next``.

    ``levels`` counts the downsampled pyramid levels above full resolution.
    ``min_eig`` applies to the window-averaged gradient tensor (gradients are
    Sobel/8, i.e. intensity per pixel). A point is DIVERGED when that tensor is
    near-singular at any level or when the full-resolution iterations run out
    before the update drops below ``eps`` pixels.
    """
    a = to_gray(prev)
    b = to_gray(next)
    if a.shape != b.shape:
        raise SizeMismatch(f"frame sizes differ: {a.shape} vs {b.shape}")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return Tracks.empty()
    h, w = a.shape

    pyr_a = build_pyramid(a, levels)
    pyr_b = build_pyramid(b, levels)
    half = window // 2
    off = np.arange(-half, half + 1, dtype=float)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    ox, oy = ox.ravel(), oy.ravel()
    npix = ox.size

    base = pts - 0.5                       # array coordinates at level 0
    guess = np.zeros((n, 2))
    diverged = np.zeros(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)

    for lvl in range(len(pyr_a) - 1, -1, -1):
        I, J = pyr_a[lvl], pyr_b[lvl]
        gx, gy = sobel(I)
        gx /= 8.0
        gy /= 8.0
        scale = 2.0 ** lvl
        c = base / scale
        wx = c[:, 0:1] + ox
        wy = c[:, 1:2] + oy
        lh, lw = I.shape
        Iw = bilinear_sample(I, wx, wy)
        Ix = bilinear_sample(gx, wx, wy)
        Iy = bilinear_sample(gy, wx, wy)
        # window samples falling outside the image carry no information
        in_I = (wx >= 0) & (wx <= lw - 1) & (wy >= 0) & (wy <= lh - 1)
        Ixm = np.where(in_I, Ix, 0.0)
        Iym = np.where(in_I, Iy, 0.0)
        gxx = (Ixm * Ixm).sum(1) / npix
        gxy = (Ixm * Iym).sum(1) / npix
        gyy = (Iym * Iym).sum(1) / npix
        lam = 0.5 * (gxx + gyy) - np.sqrt(0.25 * (gxx - gyy) ** 2 + gxy * gxy)
        diverged |= lam < min_eig

        d = np.zeros((n, 2))
        active = ~diverged
        done = np.zeros(n, dtype=bool)
        for _ in range(max_iter):
            idx = np.nonzero(active & ~done)[0]
            if idx.size == 0:
                break
            pos = c[idx] + guess[idx] + d[idx]
            jx = pos[:, 0:1] + ox
            jy = pos[:, 1:2] + oy
            Jw = bilinear_sample(J, jx, jy)
            m = in_I[idx] & (jx >= 0) & (jx <= lw - 1) & (jy >= 0) & (jy <= lh - 1)
            ix, iy = Ixm[idx] * m, Iym[idx] * m
            axx = (ix * ix).sum(1) / npix
            axy = (ix * iy).sum(1) / npix
            ayy = (iy * iy).sum(1) / npix
            det = axx * ayy - axy * axy
            lam_i = 0.5 * (axx + ayy) - np.sqrt(0.25 * (axx - ayy) ** 2 + axy * axy)
            sing = lam_i < min_eig
            if sing.any():
                diverged[idx[sing]] = True
                active[idx[sing]] = False
                keep = ~sing
                idx, pos, ix, iy = idx[keep], pos[keep], ix[keep], iy[keep]
                Jw, det = Jw[keep], det[keep]
                axx, axy, ayy = axx[keep], axy[keep], ayy[keep]
                if idx.size == 0:
                    break
            err = Iw[idx] - Jw
            bx = (err * ix).sum(1) / npix
            by = (err * iy).sum(1) / npix
            step_x = (ayy * bx - axy * by) / det
            step_y = (axx * by - axy * bx) / det
            d[idx, 0] += step_x
            d[idx, 1] += step_y
            small = step_x * step_x + step_y * step_y < eps * eps
            done[idx[small]] = True
            # stop iterating points that have run far outside this level
            far = ((pos[:, 0] < -half) | (pos[:, 0] > lw - 1 + half)
                   | (pos[:, 1] < -half) | (pos[:, 1] > lh - 1 + half))
            done[idx[far]] = True
        if lvl == 0:
            converged = done & active
            guess = guess + d
        else:
            guess = 2.0 * (guess + d)

    q = pts + guess
    status = np.full(n, Status.VALID, dtype=np.int8)
    status[~converged] = Status.DIVERGED
    oob = (q[:, 0] < 0) | (q[:, 0] >= w) | (q[:, 1] < 0) | (q[:, 1] >= h) | ~np.isfinite(q).all(1)
    status[oob & ~diverged] = Status.OUT_OF_BOUNDS
    status[diverged] = Status.DIVERGED
    q = np.where(np.isfinite(q), q, pts)
    return Tracks(pts, q, status)


def forward_backward_filter(pairs: Tracks, prev, next, fb_threshold: float = 0.5, **lk_kwargs) -> Tracks:
    """Re-track each VALID ``q`` back into ``prev`` and reject poor round trips."""
    out = Tracks(pairs.p.copy(), pairs.q.copy(), pairs.status.copy())
    idx = np.nonzero(out.is_valid)[0]
    if idx.size == 0:
        return out
    back = lk_track(next, prev, out.q[idx], **lk_kwargs)
    err = np.linalg.norm(back.q - out.p[idx], axis=1)
    bad = (back.status != Status.VALID) | ~(err <= fb_threshold)
    out.status[idx[bad]] = Status.FB_REJECTED
    return out


@dataclass(frozen=True)
class TrackerConfig:
    max_corners: int = 500
    quality_level: float = 0.01
    min_distance: float = 10.0
    block_size: int = 7
    levels: int = 3
    window: int = 21
    max_iter: int = 30
    eps: float = 0.01
    fb_threshold: float = 0.5

    def __post_init__(self):
        if self.max_corners < 1:
            raise ConfigError("max_corners must be >= 1")
        if not 0 < self.quality_level <= 1:
            raise ConfigError("quality_level must be in (0, 1]")
        if self.min_distance < 0:
            raise ConfigError("min_distance must be >= 0")
        for name in ("block_size", "window"):
            v = getattr(self, name)
            if v < 3 or v % 2 == 0:
                raise ConfigError(f"{name} must be an odd integer >= 3")
        if self.levels < 0:
            raise ConfigError("levels must be >= 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.fb_threshold <= 0:
            raise ConfigError("fb_threshold must be > 0")


def track_frames(prev, next, cfg: TrackerConfig = TrackerConfig()) -> Tracks:
    """Detect corners in ``prev``, track them into ``next`` and FB-filter them."""
    corners = shi_tomasi(prev, cfg.max_corners, cfg.quality_level, cfg.min_distance, cfg.block_size)
    if not corners:
        return Tracks.empty()
    pts = np.array([c.position for c in corners])
    lk = dict(levels=cfg.levels, window=cfg.window, max_iter=cfg.max_iter, eps=cfg.eps)
    fwd = lk_track(prev, next, pts, **lk)
    return forward_backward_filter(fwd, prev, next, cfg.fb_threshold, **lk)
