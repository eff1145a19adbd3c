"""Focal BCE with one-sided label smoothing and quality-rating weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LossConfig", "smooth_labels", "focal_bce", "rating_weight", "weighted_clip_loss"]

_CLIP = 1e-15


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    smoothing_value: float = 0.01
    rating_weighting: bool = True
    unrated_default_weight: float = 0.5

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 <= self.smoothing_value < 0.5:
            raise ValueError("smoothing_value must lie in [0, 0.5)")
        if not 0.0 < self.unrated_default_weight <= 1.0:
            raise ValueError("unrated_default_weight must lie in (0, 1]")


def smooth_labels(targets, value: float) -> np.ndarray:
    """Raise every negative target to ``value``; positives stay at 1."""
    t = np.asarray(targets, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("smooth_labels expects binary targets")
    return np.where(t == 1, 1.0, value)


def focal_bce(p, y, gamma: float = 2.0):
    """Mean over classes of (1 - p_t)**gamma * BCE(p, y).

    ``p_t = y p + (1 - y)(1 - p)`` so soft targets interpolate between the
    positive and negative cases. Works on the last axis; returns
    ``(loss, dloss/dp)`` with loss reduced over that axis only.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("targets must lie in [0, 1]")
    pc = np.clip(p, _CLIP, 1.0 - _CLIP)
    bce = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    pt = y * pc + (1.0 - y) * (1.0 - pc)
    one_minus = 1.0 - pt
    mod = one_minus ** gamma
    dbce = -y / pc + (1.0 - y) / (1.0 - pc)
    if gamma == 0:
        dmod = 0.0
    else:
        dmod = -gamma * one_minus ** (gamma - 1.0) * (2.0 * y - 1.0)
    k = p.shape[-1]
    loss = (mod * bce).mean(axis=-1)
    grad = (dmod * bce + mod * dbce) / k
    return loss, grad


def rating_weight(rating, config: LossConfig):
    r = np.asarray(rating, dtype=np.float64)
    if np.any((r < 0) | (r > 5)):
        raise ValueError("rating must lie in [0, 5]")
    if not config.rating_weighting:
        return np.ones_like(r)
    return np.where(r == 0, config.unrated_default_weight, r / 5.0)


def weighted_clip_loss(clip_prediction, targets, rating, config: LossConfig):
    """Rating-weighted focal loss on smoothed clip labels; returns (loss, dloss/dprediction)."""
    y = smooth_labels(targets, config.smoothing_value)
    loss, grad = focal_bce(clip_prediction, y, config.focal_gamma)
    w = rating_weight(rating, config)
    return loss * w, grad * np.asarray(w)[..., None]
