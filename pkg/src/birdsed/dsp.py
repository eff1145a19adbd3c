"""Log-mel spectrogram frontend.

Defaults follow the training recipe: 32 kHz audio, 128 HTK mel bands
between 50 Hz and 14 kHz, hop 512, no top-dB clamp.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft

from .audio import AudioClip

__all__ = [
    "SpectrogramParams",
    "MelSpectrogram",
    "EmptyFilterWarning",
    "hz_to_mel",
    "mel_to_hz",
    "stft_power",
    "stft_power_batch",
    "mel_filterbank",
    "mel_center_frequencies",
    "power_to_db",
    "melspectrogram",
    "melspectrogram_batch",
    "save_tensor",
    "load_tensor",
]


class EmptyFilterWarning(UserWarning):
    """Some mel filter collapses because the FFT grid is too coarse."""


@dataclass(frozen=True)
class SpectrogramParams:
    sample_rate: int = 32000
    n_fft: int = 2048
    hop_size: int = 512
    n_mels: int = 128
    fmin: float = 50.0
    fmax: float = 14000.0
    power: float = 2.0
    db_floor_epsilon: float = 1e-10

    def __post_init__(self):
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got {self.fmin}, {self.fmax}")
        if not 0 < self.hop_size <= self.n_fft:
            raise ValueError("need 0 < hop_size <= n_fft")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.db_floor_epsilon <= 0:
            raise ValueError("db_floor_epsilon must be positive")

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_size


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    params: SpectrogramParams = field(default_factory=SpectrogramParams)

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _hann(n_fft: int) -> np.ndarray:
    # periodic Hann, the usual STFT convention
    n = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_fft)


def _frames(x: np.ndarray, params: SpectrogramParams) -> np.ndarray:
    pad = params.n_fft // 2
    if x.shape[-1] <= pad:
        raise ValueError(
            f"signal of {x.shape[-1]} samples is too short for n_fft={params.n_fft} with reflect padding"
        )
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)], mode="reflect")
    n_frames = params.n_frames(x.shape[-1])
    view = np.lib.stride_tricks.sliding_window_view(xp, params.n_fft, axis=-1)
    return view[..., : (n_frames - 1) * params.hop_size + 1 : params.hop_size, :]


def stft_power_batch(samples: np.ndarray, params: SpectrogramParams) -> np.ndarray:
    """Power STFT of a stack of equal-length signals, shape (..., n_fft/2+1, frames)."""
    frames = _frames(np.asarray(samples), params)
    win = _hann(params.n_fft).astype(frames.dtype if frames.dtype == np.float32 else np.float64)
    spec = scipy.fft.rfft(frames * win, axis=-1)
    power = np.abs(spec)
    if params.power == 2.0:
        power = power * power
    elif params.power != 1.0:
        power = power ** params.power
    return np.swapaxes(power, -1, -2)


def stft_power(clip: AudioClip, params: SpectrogramParams) -> np.ndarray:
    """Hann-windowed, centred (reflect-padded) |STFT|**power."""
    if clip.sample_rate != params.sample_rate:
        raise ValueError(f"clip is {clip.sample_rate} Hz, params expect {params.sample_rate} Hz")
    return stft_power_batch(np.asarray(clip.samples, dtype=np.float64), params)


def mel_center_frequencies(params: SpectrogramParams) -> np.ndarray:
    """The n_mels + 2 filter edge/centre frequencies, equally spaced in mel."""
    mels = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def _filterbank_cached(params: SpectrogramParams) -> np.ndarray:
    edges = mel_center_frequencies(params)
    freqs = np.arange(params.n_fft // 2 + 1) * params.sample_rate / params.n_fft
    lo, c, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (c - lo)
    fall = (hi - freqs) / (hi - c)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    peak = fb.max(axis=1)
    empty = np.flatnonzero(peak == 0)
    if len(empty):
        warnings.warn(
            f"{len(empty)} mel filters contain no FFT bin (first: {empty[0]}); "
            "increase n_fft or reduce n_mels",
            EmptyFilterWarning,
            stacklevel=3,
        )
    fb[peak > 0] /= peak[peak > 0, None]
    fb.setflags(write=False)
    return fb


def mel_filterbank(params: SpectrogramParams) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak and no area normalisation.

    Returns an (n_mels, n_fft/2 + 1) matrix. Row ``m`` is the triangle on
    edges ``m, m+1, m+2`` evaluated at the bin frequencies and scaled so its
    largest sampled weight (the centre bin) is exactly 1. Supports are open
    intervals between edges, so only adjacent rows overlap.
    """
    return _filterbank_cached(params)


def power_to_db(power, epsilon: float = 1e-10) -> np.ndarray:
    power = np.asarray(power)
    return 10.0 * np.log10(np.maximum(power, epsilon))


def melspectrogram_batch(samples: np.ndarray, params: SpectrogramParams,
                         dtype=np.float32, block: int = 16) -> np.ndarray:
    """Log-mel spectrograms for a stack of chunks, shape (n, n_mels, frames).

    Processed ``block`` chunks at a time to bound the framing buffer.
    """
    samples = np.asarray(samples, dtype=dtype)
    fb = mel_filterbank(params)
    top = int(np.nonzero(fb.any(axis=0))[0].max()) + 1
    fb_t = np.ascontiguousarray(fb[:, :top].T, dtype=dtype)
    win = _hann(params.n_fft).astype(dtype)
    n_frames = params.n_frames(samples.shape[-1])
    out = np.empty((len(samples), params.n_mels, n_frames), dtype=dtype)
    for start in range(0, len(samples), block):
        spec = scipy.fft.rfft(_frames(samples[start:start + block], params) * win, axis=-1)[..., :top]
        power = spec.real * spec.real + spec.imag * spec.imag
        if params.power != 2.0:
            power = np.sqrt(power) ** params.power
        mel = power @ fb_t
        out[start:start + block] = np.swapaxes(power_to_db(mel, params.db_floor_epsilon), -1, -2)
    return out


def melspectrogram(clip: AudioClip, params: SpectrogramParams | None = None) -> MelSpectrogram:
    params = params or SpectrogramParams()
    power = stft_power(clip, params)
    mel = mel_filterbank(params) @ power
    return MelSpectrogram(power_to_db(mel, params.db_floor_epsilon), params)


_TENSOR_MAGIC = b"BSTN"


def save_tensor(path, array) -> None:
    """Dump ``array`` as a small header (magic, ndim, dims) plus little-endian float32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _TENSOR_MAGIC or len(data) < 8:
        raise ValueError(f"{path}: not a tensor file")
    (ndim,) = struct.unpack("<I", data[4:8])
    dims = struct.unpack(f"<{ndim}I", data[8:8 + 4 * ndim])
    payload = data[8 + 4 * ndim:]
    if len(payload) != 4 * int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match header")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
