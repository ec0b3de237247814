"""Road IoU and temporal-consistency statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizeMismatch


@dataclass(frozen=True)
class EvalResult:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def iou_road(self) -> float:
        """tp / (tp + fp + fn); 1.0 when both masks are empty."""
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "EvalResult") -> "EvalResult":
        return EvalResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn, "iou_road": self.iou_road}


def iou(pred, gt) -> EvalResult:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise SizeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return EvalResult(tp, fp, fn, pred.size - tp - fp - fn)


def aggregate(results) -> dict:
    """Dataset IoU from summed counts plus the mean of per-image IoUs."""
    results = list(results)
    if not results:
        return {"iou_aggregate": 1.0, "iou_mean_per_image": 1.0, "n_images": 0}
    total = results[0]
    for r in results[1:]:
        total = total + r
    return {
        "iou_aggregate": total.iou_road,
        "iou_mean_per_image": float(np.mean([r.iou_road for r in results])),
        "n_images": len(results),
        **{k: v for k, v in total.to_json().items() if k != "iou_road"},
    }


def inconsistent_flags(logits_a, logits_b, tracks) -> np.ndarray:
    """True where the hard labels at ``p`` (frame a) and ``q`` (frame b) differ."""
    from .losses import sample_logits

    if len(tracks) == 0:
        return np.zeros(0, dtype=bool)
    ya = sample_logits(logits_a, tracks.p)
    yb = sample_logits(logits_b, tracks.q)
    return (ya > 0) != (yb > 0)


def consistency_rate(model, pair, tracked) -> float:
    """Fraction of tracked pairs whose predicted labels agree; 1.0 when empty.

    ``model`` is any callable mapping an image to a logit map; ``pair`` is the
    two images.
    """
    if len(tracked) == 0:
        return 1.0
    flags = inconsistent_flags(model(pair[0]), model(pair[1]), tracked)
    return 1.0 - flags.sum() / len(flags)
