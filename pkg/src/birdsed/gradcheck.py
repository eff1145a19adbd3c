"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .losses import LossConfig, weighted_clip_loss
from .model import Weights, backward, forward

__all__ = ["relative_error", "numerical_gradient", "activation_signature", "check_model_gradients"]


def relative_error(a, b, floor: float = 1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def activation_signature(cache) -> bytes:
    """Bytes identifying every discrete branch taken (ReLU masks, max indices)."""
    parts = []
    for c_conv, c_bn, relu_mask, c_pool in cache.blocks:
        parts.append(np.packbits(relu_mask).tobytes())
    parts.append(cache.freq[1].tobytes())
    parts.append(cache.chunk_argmax.tobytes())
    return b"".join(parts)


def check_model_gradients(weights: Weights, x, targets, ratings, loss_config: LossConfig,
                          h: float = 1e-4, fallback_h: float = 1e-7, dropout_seed: int = 0):
    """Compare backward() with central differences of the full weighted focal loss.

    Coordinates whose +-h perturbation flips a ReLU or a max selection sit on
    a kink, where central differences are not defined at step ``h``; they are
    re-measured with ``fallback_h``. Returns a dict name -> (analytic,
    numeric, kink mask).
    """
    def run(keep=False):
        out = forward(x, weights, mode="train", rng=np.random.default_rng(dropout_seed),
                      keep_cache=keep, update_stats=False)
        return out

    out, cache = run(keep=True)
    base_sig = activation_signature(cache)
    losses, dpred = weighted_clip_loss(out.clip, targets, ratings, loss_config)
    analytic = backward(dpred, cache, weights)

    def loss_and_sig():
        o, c = run(keep=True)
        return float(weighted_clip_loss(o.clip, targets, ratings, loss_config)[0].sum()), activation_signature(c)

    results = {}
    for name in weights.trainable():
        w = weights[name]
        num = np.zeros_like(w, dtype=np.float64)
        kinks = np.zeros(w.shape, dtype=bool)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = w[i]
            w[i] = old + h
            lp, sp = loss_and_sig()
            w[i] = old - h
            lm, sm = loss_and_sig()
            w[i] = old
            if sp != base_sig or sm != base_sig:
                kinks[i] = True
                w[i] = old + fallback_h
                lp, _ = loss_and_sig()
                w[i] = old - fallback_h
                lm, _ = loss_and_sig()
                w[i] = old
                num[i] = (lp - lm) / (2 * fallback_h)
            else:
                num[i] = (lp - lm) / (2 * h)
        results[name] = (analytic[name], num, kinks)
    return results
