"""Training-time augmentations: background noise, selective mixup, spectrogram masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .dsp import MelSpectrogram

__all__ = [
    "MixupPolicy",
    "SpecAugmentPolicy",
    "NoisePolicy",
    "rms",
    "mix_background",
    "selective_mixup",
    "spec_augment",
    "spec_augment_array",
]


@dataclass(frozen=True)
class MixupPolicy:
    beta_alpha: float = 1.0
    apply_probability: float = 0.5

    def __post_init__(self):
        if self.beta_alpha <= 0:
            raise ValueError("beta_alpha must be positive")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")

    def draw_lambda(self, rng: np.random.Generator) -> float:
        return float(rng.beta(self.beta_alpha, self.beta_alpha))


@dataclass(frozen=True)
class SpecAugmentPolicy:
    n_freq_masks: int = 2
    max_freq_width: int = 16
    n_time_masks: int = 2
    max_time_width: int = 32
    fill_value: float | str = -100.0   # a dB value, or "min" for the chunk's own floor

    def __post_init__(self):
        if min(self.n_freq_masks, self.max_freq_width, self.n_time_masks, self.max_time_width) < 0:
            raise ValueError("mask counts and widths must be non-negative")
        if isinstance(self.fill_value, str) and self.fill_value != "min":
            raise ValueError(f"fill_value must be a number or 'min', got {self.fill_value!r}")


@dataclass(frozen=True)
class NoisePolicy:
    """Background mixing: SNR uniform in [snr_low_db, snr_high_db] with ``apply_probability``."""

    snr_low_db: float = 0.0
    snr_high_db: float = 20.0
    apply_probability: float = 0.5


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    if len(noise) >= n:
        return noise[:n]
    return np.tile(noise, -(-n // len(noise)))[:n]


def mix_background(clip: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """Add ``noise`` to ``clip`` at the requested signal-to-noise ratio.

    The noise gain is rms(clip)/rms(noise) * 10**(-snr_db/20), so the result
    does not depend on the noise clip's own level. A silent clip falls back
    to a gain of 10**(-snr_db/20). The mix is peak-normalised if it would clip.
    """
    if clip.sample_rate != noise.sample_rate:
        raise ValueError("clip and noise sample rates differ")
    if len(noise.samples) == 0:
        raise ValueError("noise clip is empty")
    x = np.asarray(clip.samples, dtype=np.float64)
    n = _fit_length(np.asarray(noise.samples, dtype=np.float64), len(x))
    noise_rms = rms(n)
    if noise_rms == 0.0:
        raise ValueError("noise clip is silent (rms 0)")
    signal_rms = rms(x)
    if signal_rms > 0.0:
        gain = signal_rms / noise_rms * 10.0 ** (-snr_db / 20.0)
    else:
        gain = 10.0 ** (-snr_db / 20.0)
    out = x + gain * n
    peak = np.max(np.abs(out)) if out.size else 0.0
    if peak > 1.0:
        out = out / peak
    return AudioClip(out.astype(np.asarray(clip.samples).dtype, copy=False), clip.sample_rate)


def selective_mixup(spec_a, labels_a, spec_b, labels_b, lam: float, partner_is_scored: bool = True):
    """Blend two dB spectrograms; labels combine by elementwise max.

    ``spec_b`` must come from a scored-species recording; callers pass that
    fact as ``partner_is_scored``.
    """
    if not partner_is_scored:
        raise ValueError("selective mixup partner must be a scored-species recording")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    a = spec_a.values if isinstance(spec_a, MelSpectrogram) else np.asarray(spec_a)
    b = spec_b.values if isinstance(spec_b, MelSpectrogram) else np.asarray(spec_b)
    if a.shape != b.shape:
        raise ValueError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
    la, lb = np.asarray(labels_a), np.asarray(labels_b)
    if la.shape != lb.shape:
        raise ValueError("label vectors differ in length")
    if lam == 1.0:
        mixed = a.copy()
    elif lam == 0.0:
        mixed = b.copy()
    else:
        mixed = lam * a + (1.0 - lam) * b
    labels = np.maximum(la, lb)
    if isinstance(spec_a, MelSpectrogram):
        mixed = MelSpectrogram(mixed, spec_a.params)
    return mixed, labels


def spec_augment_array(values: np.ndarray, policy: SpecAugmentPolicy,
                       rng: np.random.Generator) -> np.ndarray:
    out = np.array(values, copy=True)
    n_rows, n_cols = out.shape[-2:]
    fill = out.min() if policy.fill_value == "min" else policy.fill_value
    for _ in range(policy.n_freq_masks):
        w = int(rng.integers(0, min(policy.max_freq_width, n_rows) + 1))
        start = int(rng.integers(0, n_rows - w + 1))
        out[..., start:start + w, :] = fill
    for _ in range(policy.n_time_masks):
        w = int(rng.integers(0, min(policy.max_time_width, n_cols) + 1))
        start = int(rng.integers(0, n_cols - w + 1))
        out[..., :, start:start + w] = fill
    return out


def spec_augment(spec: MelSpectrogram, policy: SpecAugmentPolicy,
                 rng: np.random.Generator) -> MelSpectrogram:
    """Frequency and time masking; each band's width is uniform in [0, max_width]."""
    return MelSpectrogram(spec_augment_array(spec.values, policy, rng), spec.params)
