"""Walk through the log-mel frontend on a pure tone and a synthetic call."""

import numpy as np

from birdsed.audio import AudioClip
from birdsed.dataset import SynthConfig, render_motif, species_motif
from birdsed.dsp import SpectrogramParams, mel_center_frequencies, melspectrogram

params = SpectrogramParams()
sr = params.sample_rate
t = np.arange(5 * sr) / sr

# 1 kHz tone, 5 s at the default parameters
tone = AudioClip(0.5 * np.sin(2 * np.pi * 1000.0 * t), sr)
spec = melspectrogram(tone, params)
centres = mel_center_frequencies(params)[1:-1]
peak = int(spec.values[:, 100:200].mean(axis=1).argmax())
print("shape", spec.values.shape)
print(f"peak filter {peak}, centre {centres[peak]:.1f} Hz")

# one call of every synthetic species, carrier vs the filter it lights up
cfg = SynthConfig()
rng = np.random.default_rng(0)
for k in range(cfg.n_species):
    m = species_motif(k, cfg)
    wave = np.zeros(5 * sr)
    call = render_motif(k, cfg, rng)
    wave[: len(call)] = 0.3 * call
    s = melspectrogram(AudioClip(wave, sr), params).values
    band = int(s.max(axis=1).argmax())
    print(f"sp{k:02d} {m['texture']:<9} carrier {m['carrier']:7.1f} Hz -> filter {band:3d} ({centres[band]:7.1f} Hz)")
