"""Segment-level scoring of long recordings with a trained model."""

from __future__ import annotations

import numpy as np

from .audio import AudioClip, resample
from .calibrate import PredictionTable
from .dsp import SpectrogramParams, melspectrogram_batch
from .model import Weights, forward

__all__ = ["segment_clip", "predict_segments", "predict_files"]


def segment_clip(clip: AudioClip, chunk_s: float) -> np.ndarray:
    """Cut into consecutive chunks; a trailing partial chunk is zero-padded."""
    width = int(round(chunk_s * clip.sample_rate))
    n = len(clip.samples)
    n_seg = max(1, -(-n // width))
    out = np.zeros(n_seg * width, dtype=np.float32)
    out[:n] = clip.samples
    return out.reshape(n_seg, width)


def predict_segments(weights: Weights, clip: AudioClip, params: SpectrogramParams | None = None,
                     chunk_s: float = 5.0, batch: int = 16) -> np.ndarray:
    """Clipwise probabilities for every ``chunk_s`` segment, shape (n_segments, K)."""
    params = params or SpectrogramParams()
    if clip.sample_rate != params.sample_rate:
        clip = resample(clip, params.sample_rate)
    segs = segment_clip(clip, chunk_s)
    out = []
    for start in range(0, len(segs), batch):
        specs = melspectrogram_batch(segs[start:start + batch], params)
        out.append(forward(specs[:, None], weights, mode="eval").clip)
    return np.concatenate(out).astype(np.float64)


def predict_files(weights: Weights, clips: dict, species, params=None, chunk_s=5.0) -> PredictionTable:
    """``clips`` maps recording id -> AudioClip; rows follow the mapping's order."""
    keys, rows = [], []
    for rec, clip in clips.items():
        p = predict_segments(weights, clip, params, chunk_s)
        keys.extend((rec, i) for i in range(len(p)))
        rows.append(p)
    probs = np.concatenate(rows) if rows else np.zeros((0, len(species)))
    return PredictionTable(keys, species, probs)
