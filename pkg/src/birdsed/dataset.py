"""Recording metadata, long-tail counts, batch assembly and a synthetic soundscape generator."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import AudioClip, crop_window, load_wav, resample, write_wav
from .augment import MixupPolicy, NoisePolicy, SpecAugmentPolicy, mix_background, spec_augment_array
from .dsp import SpectrogramParams, hz_to_mel, mel_to_hz, melspectrogram_batch
from .metrics import NOCALL

__all__ = [
    "Recording",
    "SpeciesTable",
    "SegmentTruth",
    "Batch",
    "MetadataError",
    "ClipLoader",
    "parse_metadata",
    "write_metadata",
    "read_species_table",
    "write_species_table",
    "class_distribution",
    "sample_batch",
    "batch_rng",
    "SynthConfig",
    "SynthResult",
    "zipf_counts",
    "species_motif",
    "synth_dataset",
    "read_truth",
    "write_truth",
]


class MetadataError(ValueError):
    pass


@dataclass(frozen=True)
class Recording:
    audio_path: str
    labels: tuple
    rating: float
    is_scored_primary: bool = True

    def __post_init__(self):
        if not self.labels:
            raise ValueError(f"{self.audio_path}: recording needs at least one label")
        if not 0.0 <= self.rating <= 5.0:
            raise ValueError(f"{self.audio_path}: rating {self.rating} outside [0, 5]")

    @property
    def primary(self) -> str:
        return self.labels[0]


@dataclass
class SpeciesTable:
    species: list
    scored_mask: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        self.species = list(self.species)
        n = len(self.species)
        if len(set(self.species)) != n:
            raise ValueError("duplicate species identifiers")
        self.scored_mask = (np.ones(n, dtype=bool) if self.scored_mask is None
                            else np.asarray(self.scored_mask, dtype=bool))
        self.counts = np.zeros(n, dtype=np.int64) if self.counts is None else np.asarray(self.counts, dtype=np.int64)
        if self.scored_mask.shape != (n,) or self.counts.shape != (n,):
            raise ValueError("scored_mask and counts must have one entry per species")
        if n and not self.scored_mask.any():
            raise ValueError("at least one species must be scored")
        self._index = {s: i for i, s in enumerate(self.species)}

    def __len__(self):
        return len(self.species)

    def index(self, species: str) -> int:
        return self._index[species]

    def add(self, species: str, scored: bool = False) -> int:
        if species in self._index:
            return self._index[species]
        self.species.append(species)
        self.scored_mask = np.append(self.scored_mask, scored)
        self.counts = np.append(self.counts, 0)
        self._index[species] = len(self.species) - 1
        return self._index[species]

    @property
    def scored(self) -> list:
        return [s for s, m in zip(self.species, self.scored_mask) if m]

    def multi_hot(self, labels) -> np.ndarray:
        v = np.zeros(len(self.species), dtype=np.float32)
        for lab in labels:
            v[self._index[lab]] = 1.0
        return v


@dataclass(frozen=True)
class SegmentTruth:
    recording: str
    segment_index: int
    labels: frozenset

    def __post_init__(self):
        if self.segment_index < 0:
            raise ValueError("segment_index must be >= 0")

    @property
    def is_call(self) -> bool:
        return bool(self.labels) and NOCALL not in self.labels


def parse_metadata(path, table: SpeciesTable | None = None, strict: bool = False) -> list:
    """Read ``filename,labels,rating`` rows.

    Audio paths are resolved relative to the CSV's directory. With a
    ``table``, unknown species are appended to it (unscored), or rejected
    when ``strict`` is set; ``is_scored_primary`` is taken from the table.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metadata file not found: {path}")
    base = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MetadataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["filename", "labels", "rating"]:
        raise MetadataError(f"{path}: header must start with filename,labels,rating; got {rows[0]}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise MetadataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        fname, labels_field, rating_field = (c.strip() for c in row[:3])
        labels = tuple(dict.fromkeys(labels_field.split()))
        if not labels:
            raise MetadataError(f"{path}:{lineno}: empty labels for {fname!r}")
        try:
            rating = float(rating_field)
        except ValueError:
            raise MetadataError(f"{path}:{lineno}: rating {rating_field!r} is not a number") from None
        if not 0.0 <= rating <= 5.0:
            raise MetadataError(f"{path}:{lineno}: rating {rating} outside [0, 5]")
        scored = True
        if table is not None:
            for lab in labels:
                if lab not in table._index:
                    if strict:
                        raise MetadataError(f"{path}:{lineno}: unknown species {lab!r}")
                    table.add(lab)
            scored = bool(table.scored_mask[table.index(labels[0])])
        records.append(Recording(str(base / fname), labels, rating, scored))
    if not records:
        raise MetadataError(f"{path}: no data rows")
    return records


def write_metadata(path, rows) -> None:
    """``rows`` are (filename, labels, rating) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "labels", "rating"])
        for fname, labels, rating in rows:
            w.writerow([fname, " ".join(labels), f"{rating:g}"])


def write_species_table(path, table: SpeciesTable, sort_by_count: bool = False) -> None:
    order = range(len(table))
    if sort_by_count:
        order = sorted(order, key=lambda i: (-int(table.counts[i]), i))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["species", "scored", "count"])
        for i in order:
            w.writerow([table.species[i], int(table.scored_mask[i]), int(table.counts[i])])


def read_species_table(path) -> SpeciesTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetadataError(f"{path}: empty species table")
    return SpeciesTable(
        [r["species"] for r in rows],
        [bool(int(r.get("scored", 1))) for r in rows],
        [int(r.get("count", 0)) for r in rows],
    )


def class_distribution(recordings, table: SpeciesTable) -> SpeciesTable:
    """Count recordings per species (multi-label: each label counts once)."""
    counts = np.zeros(len(table), dtype=np.int64)
    for rec in recordings:
        for lab in set(rec.labels):
            counts[table.index(lab)] += 1
    return SpeciesTable(list(table.species), table.scored_mask.copy(), counts)


# ---------------------------------------------------------------- batches

class ClipLoader:
    """Decode-once cache of recordings, resampled to the frontend rate."""

    def __init__(self, sample_rate: int):
        self.sample_rate = sample_rate
        self._cache = {}

    def __call__(self, path) -> AudioClip:
        clip = self._cache.get(path)
        if clip is None:
            clip = load_wav(path)
            if clip.sample_rate != self.sample_rate:
                clip = resample(clip, self.sample_rate)
            self._cache[path] = clip
        return clip


@dataclass
class Batch:
    specs: np.ndarray        # (B, P, n_mels, frames)
    labels: np.ndarray       # (B, K)
    ratings: np.ndarray      # (B,)
    indices: np.ndarray      # (B,) recording indices
    partners: np.ndarray     # (B,) partner index or -1
    lambdas: np.ndarray      # (B,) mixing weight of the item itself (1.0 without mixup)


def batch_rng(seed: int, batch_index: int) -> np.random.Generator:
    """Independent stream per batch so assembly order does not matter."""
    return np.random.default_rng([int(seed), int(batch_index)])


def sample_batch(recordings, table: SpeciesTable, batch_size: int, mixup: MixupPolicy | None,
                 rng: np.random.Generator, params: SpectrogramParams | None = None,
                 window_s: float = 30.0, chunk_s: float = 5.0, n_parts: int = 6,
                 loader=None, noise_clips=None, noise_policy: NoisePolicy | None = None,
                 specaug: SpecAugmentPolicy | None = None) -> Batch:
    """Assemble one training batch.

    Each item is a uniformly drawn recording, randomly cropped to
    ``window_s`` and split into ``n_parts`` chunks that are turned into
    log-mel spectrograms. With probability ``mixup.apply_probability`` every
    chunk is mixed with the matching chunk of one partner recording: a
    scored species is drawn uniformly, then one of its recordings, so the
    partner stream oversamples the rare tail. Labels take the union.
    """
    if not recordings:
        raise ValueError("cannot sample from an empty dataset")
    params = params or SpectrogramParams()
    loader = loader or ClipLoader(params.sample_rate)
    # partner pool grouped by primary species so every scored species is equally likely
    pools = {}
    for i, r in enumerate(recordings):
        if r.is_scored_primary:
            pools.setdefault(r.primary, []).append(i)
    scored_pool = [pools[k] for k in sorted(pools)]
    chunk_len = int(round(chunk_s * params.sample_rate))

    def windowed(idx):
        clip = crop_window(loader(recordings[idx].audio_path), window_s, rng)
        if noise_clips and noise_policy and rng.random() < noise_policy.apply_probability:
            noise = noise_clips[int(rng.integers(len(noise_clips)))]
            snr = rng.uniform(noise_policy.snr_low_db, noise_policy.snr_high_db)
            clip = mix_background(clip, noise, snr)
        return np.asarray(clip.samples, dtype=np.float32)[: chunk_len * n_parts].reshape(n_parts, chunk_len)

    items, partners, lambdas = [], np.full(batch_size, -1), np.ones(batch_size)
    waves = []
    for b in range(batch_size):
        idx = int(rng.integers(len(recordings)))
        items.append(idx)
        waves.append(windowed(idx))
        if mixup is not None and scored_pool and rng.random() < mixup.apply_probability:
            pool = scored_pool[int(rng.integers(len(scored_pool)))]
            partners[b] = pool[int(rng.integers(len(pool)))]
            lambdas[b] = mixup.draw_lambda(rng)
            waves.append(windowed(int(partners[b])))

    specs_all = melspectrogram_batch(np.concatenate(waves), params)
    specs_all = specs_all.reshape(-1, n_parts, *specs_all.shape[1:])
    specs = np.empty((batch_size,) + specs_all.shape[1:], dtype=np.float32)
    labels = np.zeros((batch_size, len(table)), dtype=np.float32)
    ratings = np.zeros(batch_size)
    pos = 0
    for b, idx in enumerate(items):
        rec = recordings[idx]
        specs[b] = specs_all[pos]
        labels[b] = table.multi_hot(rec.labels)
        ratings[b] = rec.rating
        pos += 1
        if partners[b] >= 0:
            lam = lambdas[b]
            specs[b] = lam * specs[b] + (1.0 - lam) * specs_all[pos]
            labels[b] = np.maximum(labels[b], table.multi_hot(recordings[partners[b]].labels))
            pos += 1
        if specaug is not None:
            for c in range(n_parts):
                specs[b, c] = spec_augment_array(specs[b, c], specaug, rng)
    return Batch(specs, labels, ratings, np.asarray(items), partners, lambdas)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    n_species: int = 8
    head_count: int = 64
    zipf_exponent: float = 1.0
    sample_rate: int = 32000
    clip_seconds: float = 10.0
    segment_seconds: float = 5.0
    noise_level: float = 0.01
    motif_amplitude: tuple = (0.15, 0.4)
    secondary_probability: float = 0.15
    n_scored: int = 0                 # 0 means every species is scored
    n_calib_soundscapes: int = 6
    n_test_soundscapes: int = 10
    soundscape_seconds: float = 60.0
    call_probability: float = 0.6
    n_noise_clips: int = 4
    fmin: float = 1000.0
    fmax: float = 9000.0

    def __post_init__(self):
        if self.n_species < 1 or self.head_count < 1:
            raise ValueError("n_species and head_count must be >= 1")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.clip_seconds < self.segment_seconds or self.segment_seconds <= 0:
            raise ValueError("clip_seconds must hold at least one segment")
        if not 0 <= self.call_probability <= 1 or not 0 <= self.secondary_probability <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if not 50.0 <= self.fmin < self.fmax <= 14000.0:
            raise ValueError("motif carriers must lie inside the default 50-14000 Hz mel range")


def zipf_counts(n_species: int, head_count: int, exponent: float = 1.0) -> list:
    """floor(head / rank**exponent), at least one recording per species."""
    return [max(1, int(np.floor(head_count / (r ** exponent)))) for r in range(1, n_species + 1)]


_TEXTURES = ("tone", "upchirp", "downchirp", "trill", "pips", "pair", "vee", "band")


def species_carriers(config: SynthConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_species)
    return mel_to_hz(mels)


def species_motif(index: int, config: SynthConfig) -> dict:
    """Deterministic description of one species' call."""
    carrier = float(species_carriers(config)[index])
    texture = _TEXTURES[index % len(_TEXTURES)]
    # local bandwidth of ~3 mel bins around the carrier, in Hz
    width = float(mel_to_hz(hz_to_mel(carrier) + 80) - carrier)
    burst = (0.25, 0.12, 0.12, 0.3, 0.04, 0.2, 0.2, 0.15)[index % 8]
    period = (0.45, 0.3, 0.3, 0.5, 0.1, 0.4, 0.45, 0.35)[index % 8]
    n_bursts = max(1, int(round(2.0 / period)))
    return {"carrier": carrier, "texture": texture, "width": width,
            "burst": burst, "period": period, "n_bursts": n_bursts,
            "duration": (n_bursts - 1) * period + burst}


def _render_burst(motif: dict, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(motif["burst"] * sr))
    t = np.arange(n) / sr
    u = t / motif["burst"]
    f0, w = motif["carrier"], motif["width"]
    tex = motif["texture"]
    env = np.sin(np.pi * u) ** 2
    if tex == "band":
        noise = rng.standard_normal(n + 256)
        k = np.fft.rfftfreq(len(noise), 1 / sr)
        spec = np.fft.rfft(noise) * (np.abs(k - f0) < w / 2)
        sig = np.fft.irfft(spec, len(noise))[:n]
        sig /= np.max(np.abs(sig)) + 1e-12
        return env * sig
    if tex == "tone":
        freq = np.full(n, f0)
    elif tex == "upchirp":
        freq = f0 - w + 2 * w * u
    elif tex == "downchirp":
        freq = f0 + w - 2 * w * u
    elif tex == "trill":
        freq = f0 + w * np.sin(2 * np.pi * 8.0 * t)
    elif tex == "vee":
        freq = f0 + w * (2 * np.abs(u - 0.5) * 2 - 1)
    else:
        freq = np.full(n, f0)
    phase = 2 * np.pi * np.cumsum(freq) / sr
    sig = np.sin(phase)
    if tex == "pair":
        sig = 0.5 * (sig + np.sin(phase * (f0 + 1.5 * w) / f0))
    return env * sig


def render_motif(index: int, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    m = species_motif(index, config)
    sr = config.sample_rate
    out = np.zeros(int(round(m["duration"] * sr)) + 1)
    for b in range(m["n_bursts"]):
        burst = _render_burst(m, sr, rng)
        start = int(round(b * m["period"] * sr))
        out[start:start + len(burst)] += burst
    return out


def _noise_bed(n: int, level: float, rng: np.random.Generator) -> np.ndarray:
    # white hiss plus a one-pole lowpassed component for a tilted spectrum
    white = rng.standard_normal(n)
    tilt = lfilter([1.0], [1.0, -0.97], rng.standard_normal(n))
    bed = 0.6 * white + 0.4 * tilt / (np.std(tilt) + 1e-12)
    return level * bed / (np.std(bed) + 1e-12)


def _place(signal, motif_wave, seg_index, seg_len, amp, rng):
    room = seg_len - len(motif_wave)
    offset = int(rng.integers(0, max(room, 0) + 1))
    start = seg_index * seg_len + offset
    end = min(start + len(motif_wave), len(signal))
    signal[start:end] += amp * motif_wave[: end - start]
    return start, end


@dataclass
class SynthResult:
    root: Path
    metadata_path: Path
    species_path: Path
    table: SpeciesTable
    truth: list
    calib_truth: list
    test_truth: list
    events: dict = field(default_factory=dict)


def synth_dataset(config: SynthConfig, seed: int, out_dir) -> SynthResult:
    """Write a long-tailed synthetic training set plus calibration/test soundscapes.

    Layout under ``out_dir``::

        train/*.wav, metadata.csv, truth.csv         weakly labelled recordings
        soundscapes/calib/*.wav, calib_truth.csv    strong labels for calibration
        soundscapes/test/*.wav, test_truth.csv      held-out evaluation
        noise/*.wav                                 background clips for mixing
        species.csv                                 species, scored flag, count
    """
    root = Path(out_dir)
    for sub in ("train", "soundscapes/calib", "soundscapes/test", "noise"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sr = config.sample_rate
    seg_len = int(round(config.segment_seconds * sr))
    n_seg = int(config.clip_seconds // config.segment_seconds)
    species = [f"sp{i:02d}" for i in range(config.n_species)]
    n_scored = config.n_scored or config.n_species
    scored_mask = np.zeros(config.n_species, dtype=bool)
    scored_mask[config.n_species - n_scored:] = True
    counts = zipf_counts(config.n_species, config.head_count, config.zipf_exponent)
    lo_amp, hi_amp = config.motif_amplitude
    events = {}

    def render(n_segments, plan):
        """plan: list of (segment, species index); returns samples and event spans."""
        x = _noise_bed(n_segments * seg_len, config.noise_level * float(rng.uniform(0.5, 2.0)), rng)
        spans = []
        for seg, sp in plan:
            wave = render_motif(sp, config, rng)
            start, end = _place(x, wave, seg, seg_len, float(rng.uniform(lo_amp, hi_amp)), rng)
            spans.append((species[sp], seg, start / sr, end / sr))
        peak = np.max(np.abs(x))
        if peak > 0.99:
            x *= 0.99 / peak
        return x.astype(np.float32), spans

    meta_rows, truth = [], []
    rec_id = 0
    for sp, count in enumerate(counts):
        for _ in range(count):
            name = f"rec{rec_id:04d}"
            rec_id += 1
            n_call = int(rng.integers(1, n_seg + 1))
            segs = sorted(rng.choice(n_seg, size=n_call, replace=False).tolist())
            plan = [(s, sp) for s in segs]
            labels = [species[sp]]
            if config.n_species > 1 and rng.random() < config.secondary_probability:
                other = int(rng.integers(config.n_species - 1))
                other += other >= sp
                plan.append((int(rng.integers(n_seg)), other))
                labels.append(species[other])
            x, spans = render(n_seg, plan)
            write_wav(root / "train" / f"{name}.wav", AudioClip(x, sr))
            rating = float(rng.choice([0.0, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0]))
            meta_rows.append((f"train/{name}.wav", labels, rating))
            events[name] = spans
            for s in range(n_seg):
                labs = frozenset(species[p] for seg, p in plan if seg == s)
                truth.append(SegmentTruth(name, s, labs or frozenset([NOCALL])))

    def soundscapes(kind, n_files):
        out = []
        n_ss = int(config.soundscape_seconds // config.segment_seconds)
        for i in range(n_files):
            name = f"{kind}{i:03d}"
            plan = []
            for s in range(n_ss):
                if rng.random() < config.call_probability:
                    plan.append((s, int(rng.integers(config.n_species))))
            x, spans = render(n_ss, plan)
            write_wav(root / "soundscapes" / kind / f"{name}.wav", AudioClip(x, sr))
            events[name] = spans
            for s in range(n_ss):
                labs = frozenset(species[p] for seg, p in plan if seg == s)
                out.append(SegmentTruth(name, s, labs or frozenset([NOCALL])))
        return out

    calib_truth = soundscapes("calib", config.n_calib_soundscapes)
    test_truth = soundscapes("test", config.n_test_soundscapes)

    for i in range(config.n_noise_clips):
        x = _noise_bed(seg_len, 0.1, rng).astype(np.float32)
        write_wav(root / "noise" / f"noise{i:02d}.wav", AudioClip(x, sr))

    meta_path = root / "metadata.csv"
    write_metadata(meta_path, meta_rows)
    recs = [Recording(str(root / f), tuple(l), r) for f, l, r in meta_rows]
    table = class_distribution(recs, SpeciesTable(species, scored_mask))
    species_path = root / "species.csv"
    write_species_table(species_path, table)
    write_truth(root / "truth.csv", truth)
    write_truth(root / "calib_truth.csv", calib_truth)
    write_truth(root / "test_truth.csv", test_truth)
    return SynthResult(root, meta_path, species_path, table, truth, calib_truth, test_truth, events)


def write_truth(path, truth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording", "segment_index", "labels"])
        for t in truth:
            w.writerow([t.recording, t.segment_index, " ".join(sorted(t.labels))])


def read_truth(path) -> list:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"truth file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:3] != ["recording", "segment_index", "labels"]:
            raise MetadataError(f"{path}: header must be recording,segment_index,labels")
        return [SegmentTruth(r["recording"], int(r["segment_index"]),
                             frozenset(r["labels"].split()) or frozenset([NOCALL]))
                for r in reader]
