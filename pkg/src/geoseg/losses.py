"""Geometric BCE, mutual-information consistency loss, and their logit gradients.

All functions return ``(value, gradient...)`` with gradients taken with
respect to the raw logits, so they can be fed straight into
:func:`geoseg.net.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, EmptyRegion, SizeMismatch
from .weakmask import PartialMask

LOG_EPS = 1e-12


def sigmoid(y):
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    e = np.exp(y[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def probability_vectors(y) -> np.ndarray:
    """``[1 - sigmoid(y), sigmoid(y)]`` stacked along the last axis."""
    s = sigmoid(y)
    return np.stack([1.0 - s, s], axis=-1)


def geometric_loss(logits, mask: PartialMask) -> tuple[float, np.ndarray]:
    """Mean BCE over ROAD pixels plus mean BCE over NONROAD pixels.

    IGNORE pixels contribute neither value nor gradient.
    """
    y = np.asarray(logits, dtype=float)
    if y.shape != mask.labels.shape:
        raise SizeMismatch(f"logits {y.shape} vs mask {mask.labels.shape}")
    road, nonroad = mask.road, mask.nonroad
    n, m = int(road.sum()), int(nonroad.sum())
    if n == 0 or m == 0:
        raise EmptyRegion(f"mask has {n} road and {m} non-road pixels")

    yr, yh = y[road], y[nonroad]
    # -ln(sigmoid(y)) = softplus(-y);  -ln(1 - sigmoid(y)) = softplus(y)
    value = softplus(-yr).sum() / n + softplus(yh).sum() / m
    grad = np.zeros_like(y)
    grad[road] = (sigmoid(yr) - 1.0) / n
    grad[nonroad] = sigmoid(yh) / m
    return float(value), grad


@dataclass(frozen=True)
class JointDistribution:
    P: np.ndarray
    p: np.ndarray
    p_prime: np.ndarray


def joint_distribution(s, s_prime, symmetrize: bool = False) -> JointDistribution:
    """Average outer product of paired class-probability vectors ((n, 2) each)."""
    s = np.asarray(s, dtype=float).reshape(-1, 2)
    sp = np.asarray(s_prime, dtype=float).reshape(-1, 2)
    if len(s) == 0:
        raise EmptyBatch("joint distribution of an empty batch")
    if s.shape != sp.shape:
        raise SizeMismatch(f"{s.shape} vs {sp.shape}")
    P = s.T @ sp / len(s)
    if symmetrize:
        P = 0.5 * (P + P.T)
    return JointDistribution(P, P.sum(axis=1), P.sum(axis=0))


def _xlogx_terms(x):
    """Value ``x * ln(max(x, eps))`` and its derivative, elementwise."""
    xc = np.maximum(x, LOG_EPS)
    lx = np.log(xc)
    return x * lx, lx + (x > LOG_EPS)


def mutual_information(P) -> tuple[float, np.ndarray]:
    """I(P) and dI/dP for a 2x2 joint; logs clamped at ``LOG_EPS``.

    I(P) = sum P ln P - sum p ln p - sum p' ln p'; the gradient is the exact
    derivative of that clamped expression.
    """
    P = np.asarray(P, dtype=float)
    p, pp = P.sum(axis=1), P.sum(axis=0)
    vP, dP = _xlogx_terms(P)
    vp, dp = _xlogx_terms(p)
    vq, dq = _xlogx_terms(pp)
    value = vP.sum() - vp.sum() - vq.sum()
    grad = dP - dp[:, None] - dq[None, :]
    return float(value), grad


def iic_loss(y, y_prime, symmetrize: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative mutual information of paired predictions.

    ``y`` and ``y_prime`` are the logits at matched points in the two frames.
    Returns ``(value, dL/dy, dL/dy_prime)``; ``value`` lies in ``[-ln 2, 0]``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    yp = np.asarray(y_prime, dtype=float).reshape(-1)
    n = len(y)
    if n == 0:
        raise EmptyBatch("consistency loss needs at least one pair")
    if len(yp) != n:
        raise SizeMismatch(f"{n} vs {len(yp)} logits")
    s, sp = probability_vectors(y), probability_vectors(yp)
    joint = joint_distribution(s, sp, symmetrize)
    mi, dmi = mutual_information(joint.P)
    G = -dmi
    if symmetrize:
        G = 0.5 * (G + G.T)
    ds = sp @ G.T / n          # dL/ds_k   = G s'_k / n
    dsp = s @ G / n            # dL/ds'_k  = G^T s_k / n
    sig, sigp = s[:, 1], sp[:, 1]
    gy = (ds[:, 1] - ds[:, 0]) * sig * (1.0 - sig)
    gyp = (dsp[:, 1] - dsp[:, 0]) * sigp * (1.0 - sigp)
    return -mi, gy, gyp


def bilinear_weights(points, shape):
    """Gather indices and weights for bilinear reads at (u, v) pixel coordinates.

    Pixel centres sit at half-integers; coordinates are clamped to the map.
    Returns ``(flat_index (n, 4), weight (n, 4))``.
    """
    h, w = shape
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x = np.clip(pts[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(pts[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, wts


def sample_logits(logits, points) -> np.ndarray:
    """Bilinearly interpolated logits at subpixel points."""
    y = np.asarray(logits, dtype=float)
    idx, wts = bilinear_weights(points, y.shape)
    return (y.ravel()[idx] * wts).sum(axis=1)


def scatter_logit_grad(grad_values, points, shape) -> np.ndarray:
    """Transpose of :func:`sample_logits`: spread per-point gradients onto the map."""
    idx, wts = bilinear_weights(points, shape)
    out = np.zeros(shape[0] * shape[1])
    np.add.at(out, idx.ravel(), (wts * np.asarray(grad_values, dtype=float)[:, None]).ravel())
    return out.reshape(shape)


@dataclass
class FinalLoss:
    value: float
    geometric: float
    consistency: float
    grad: np.ndarray
    grad_prime: np.ndarray


def final_loss(logits, logits_prime, mask: PartialMask, mask_prime: PartialMask,
               points=None, points_prime=None, weight: float = 1.0,
               symmetrize: bool = False) -> FinalLoss:
    """Average geometric loss over both frames plus ``weight`` times the consistency loss.

    ``points`` / ``points_prime`` are matched (u, v) locations in the first and
    second frame. With no points, or ``weight == 0``, only the geometric term
    is evaluated.
    """
    g1, d1 = geometric_loss(logits, mask)
    g2, d2 = geometric_loss(logits_prime, mask_prime)
    geo = 0.5 * (g1 + g2)
    grad = 0.5 * d1
    grad_p = 0.5 * d2
    cons = 0.0
    pts = None if points is None else np.asarray(points, dtype=float).reshape(-1, 2)
    if pts is not None and len(pts) and weight != 0:
        pts_p = np.asarray(points_prime, dtype=float).reshape(-1, 2)
        y = sample_logits(logits, pts)
        yp = sample_logits(logits_prime, pts_p)
        cons, gy, gyp = iic_loss(y, yp, symmetrize)
        grad = grad + weight * scatter_logit_grad(gy, pts, grad.shape)
        grad_p = grad_p + weight * scatter_logit_grad(gyp, pts_p, grad_p.shape)
    return FinalLoss(geo + weight * cons, geo, cons, grad, grad_p)
