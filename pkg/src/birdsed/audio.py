"""WAV decoding, resampling and the crop/split steps that feed the frontend."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AudioClip",
    "WavError",
    "MissingFileError",
    "UnsupportedFormatError",
    "TruncatedFileError",
    "load_wav",
    "write_wav",
    "resample",
    "crop_window",
    "split_chunks",
]

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV decoding problems."""


class MissingFileError(WavError, FileNotFoundError):
    pass


class UnsupportedFormatError(WavError):
    pass


class TruncatedFileError(WavError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


def _read_chunks(data: bytes, path):
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: file too short for a RIFF header")
    riff, _, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE container")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise TruncatedFileError(f"{path}: chunk {cid!r} declares {size} bytes, {len(body)} present")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def load_wav(path) -> AudioClip:
    """Decode a PCM16 or float32 WAV file into a mono clip.

    Stereo input is averaged to mono. PCM16 is scaled by 1/32768.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    chunks = _read_chunks(data, path)
    if b"fmt " not in chunks:
        raise TruncatedFileError(f"{path}: missing fmt chunk")
    if b"data" not in chunks:
        raise TruncatedFileError(f"{path}: missing data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise TruncatedFileError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"{path}: {channels} channels not supported")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(f"{path}: format tag {tag} with {bits} bits not supported")
    if rate <= 0:
        raise UnsupportedFormatError(f"{path}: sample rate {rate}")

    payload = chunks[b"data"]
    frame_bytes = dtype.itemsize * channels
    if len(payload) % frame_bytes:
        raise TruncatedFileError(f"{path}: data chunk ends mid-frame")
    raw = np.frombuffer(payload, dtype=dtype).reshape(-1, channels)
    samples = raw.astype(np.float32) * np.float32(scale)
    if channels == 2:
        samples = samples.mean(axis=1, dtype=np.float32)
    else:
        samples = samples[:, 0]
    return AudioClip(np.ascontiguousarray(samples), rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write ``clip`` as mono PCM16."""
    q = np.clip(np.round(np.asarray(clip.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    payload = q.astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _kaiser_sinc(offsets, cutoff, half_width, beta):
    w = np.zeros_like(offsets)
    inside = np.abs(offsets) < half_width
    x = offsets[inside] / half_width
    w[inside] = np.i0(beta * np.sqrt(1.0 - x * x)) / np.i0(beta)
    return cutoff * np.sinc(cutoff * offsets) * w


def resample(clip: AudioClip, target_rate: int, taps: int = 64, beta: float = 8.6,
             rolloff: float = 0.95) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    Each output sample is a weighted sum of the ``taps`` nearest input
    samples. The kernel is renormalised to unit sum per output sample so a
    constant signal passes unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    src = clip.sample_rate
    if target_rate == src:
        return clip
    x = np.asarray(clip.samples, dtype=np.float64)
    n_out = int(round(len(x) * target_rate / src))
    if n_out == 0 or len(x) == 0:
        return AudioClip(np.zeros(n_out, dtype=np.float32), target_rate)

    ratio = target_rate / src
    cutoff = min(1.0, ratio) * rolloff
    half = taps / 2.0 / min(1.0, ratio)
    span = np.arange(-int(math.ceil(half)), int(math.ceil(half)) + 1)
    out = np.empty(n_out)
    block = 8192
    for start in range(0, n_out, block):
        t = np.arange(start, min(start + block, n_out)) / ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + span[None, :]
        offsets = t[:, None] - idx
        h = _kaiser_sinc(offsets, cutoff, half, beta)
        valid = (idx >= 0) & (idx < len(x))
        h = np.where(valid, h, 0.0)
        norm = h.sum(axis=1)
        vals = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
        out[start:start + len(t)] = (h * vals).sum(axis=1) / norm
    return AudioClip(out.astype(np.float32), target_rate)


def crop_window(clip: AudioClip, window_s: float, rng: np.random.Generator) -> AudioClip:
    """Random fixed-length window; clips shorter than the window are tiled first."""
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    n = len(clip.samples)
    if n == 0:
        raise ValueError("cannot crop an empty clip")
    width = int(round(window_s * clip.sample_rate))
    if n >= width:
        offset = int(rng.integers(0, n - width + 1))
        return AudioClip(clip.samples[offset:offset + width], clip.sample_rate)
    # tiled signal is periodic with period n, so offsets in [0, n) cover every distinct window
    offset = int(rng.integers(0, n))
    reps = -(-(offset + width) // n)
    tiled = np.tile(clip.samples, reps)
    return AudioClip(tiled[offset:offset + width], clip.sample_rate)


def split_chunks(clip: AudioClip, chunk_s: float, n_parts: int) -> list[AudioClip]:
    width = int(round(chunk_s * clip.sample_rate))
    if width * n_parts != len(clip.samples):
        raise ValueError(
            f"clip has {len(clip.samples)} samples, expected {n_parts} x {width}"
        )
    return [AudioClip(clip.samples[i * width:(i + 1) * width], clip.sample_rate)
            for i in range(n_parts)]
