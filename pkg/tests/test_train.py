import numpy as np
import pytest

from birdsed.audio import AudioClip, write_wav
from birdsed.dataset import Recording, SpeciesTable, class_distribution, parse_metadata, write_metadata
from birdsed.dsp import SpectrogramParams
from birdsed.inference import predict_segments, segment_clip
from birdsed.model import ModelConfig
from birdsed.optim import cosine_lr
from birdsed.train import TrainConfig, TrainingError, split_validation, train

SR = 8000
SMALL = SpectrogramParams(sample_rate=SR, n_fft=256, hop_size=128, n_mels=24, fmin=50, fmax=3800)
TONES = (400.0, 1200.0, 2800.0)


def _tone_dataset(path, per_class=6, seconds=2.0):
    rng = np.random.default_rng(0)
    t = np.arange(int(seconds * SR)) / SR
    rows = []
    for k, f in enumerate(TONES):
        for i in range(per_class):
            x = 0.3 * np.sin(2 * np.pi * (f + rng.uniform(-20, 20)) * t) + 0.01 * rng.standard_normal(len(t))
            name = f"c{k}_{i}.wav"
            write_wav(path / name, AudioClip(x.astype(np.float32), SR))
            rows.append((name, [f"s{k}"], 5.0))
    write_metadata(path / "m.csv", rows)
    table = SpeciesTable([f"s{k}" for k in range(len(TONES))])
    recs = parse_metadata(path / "m.csv", table)
    return recs, class_distribution(recs, table)


def _config(**kw):
    base = dict(
        seed=0, epochs=2, steps_per_epoch=5, batch_size=6, lr_max=3e-3, lr_min=1e-5, window_s=1.0,
        chunk_s=0.5, n_parts=2, val_fraction=0.0, mixup=None, specaug=None, noise=None, params=SMALL,
        model=ModelConfig(3, blocks=((8, 2),), dropout_rate=0.0),
    )
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(tmp_path):
    recs, table = _tone_dataset(tmp_path)
    a = train(recs, table, _config())
    b = train(recs, table, _config())
    assert a.loss_log == b.loss_log
    for name in a.weights.tensors:
        assert a.weights.tensors[name].tobytes() == b.weights.tensors[name].tobytes()
    c = train(recs, table, _config(seed=1))
    assert c.loss_log != a.loss_log


def test_lr_log_follows_cosine(tmp_path):
    recs, table = _tone_dataset(tmp_path, per_class=2)
    cfg = _config(epochs=1, steps_per_epoch=7)
    res = train(recs, table, cfg)
    assert res.lr_log == [cosine_lr(s, 7, cfg.lr_max, cfg.lr_min) for s in range(7)]


def test_loss_falls_on_separable_data(tmp_path):
    recs, table = _tone_dataset(tmp_path)
    res = train(recs, table, _config(epochs=10, steps_per_epoch=20, lr_max=1e-2))
    first = np.mean(res.loss_log[:5])
    last = np.mean(res.loss_log[-5:])
    assert last < 0.25 * first
    t = np.arange(SR) / SR
    noise = 0.01 * np.random.default_rng(9).standard_normal(SR)
    for k, f in enumerate(TONES):
        p = predict_segments(res.weights, AudioClip(0.3 * np.sin(2 * np.pi * f * t) + noise, SR), SMALL, 0.5)
        assert np.all(p.argmax(axis=1) == k)


def test_log_csv_and_stats(tmp_path):
    recs, table = _tone_dataset(tmp_path)
    log = tmp_path / "log.csv"
    res = train(recs, table, _config(val_fraction=0.2), log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss,val_micro_f1"
    assert len(lines) == 3 and len(res.stats) == 2
    assert 0.0 <= res.stats[-1].val_micro_f1 <= 1.0
    assert not set(res.train_indices) & set(res.val_indices)


def test_split_validation_per_species():
    recs = [Recording("x", (s,), 1.0) for s in "aaaaaaaaaabbbbbc"]
    train_idx, val_idx = split_validation(recs, 0.2, 0)
    assert sorted(train_idx + val_idx) == list(range(len(recs)))
    assert sum(recs[i].primary == "a" for i in val_idx) == 2
    assert sum(recs[i].primary == "b" for i in val_idx) == 1
    assert sum(recs[i].primary == "c" for i in val_idx) == 0
    assert split_validation(recs, 0.2, 0) == (train_idx, val_idx)


def test_training_errors(tmp_path):
    recs, table = _tone_dataset(tmp_path, per_class=1)
    with pytest.raises(TrainingError):
        train([], table, _config())
    with pytest.raises(TrainingError):
        train(recs, table, _config(epochs=0))
    # a 1e30 learning rate overflows float32 on purpose
    with pytest.raises(TrainingError, match="non-finite"), np.errstate(over="ignore", invalid="ignore"):
        train(recs, table, _config(lr_max=1e30, lr_min=1e30))


def test_segment_clip_pads_tail():
    segs = segment_clip(AudioClip(np.ones(25), 10), 1.0)
    assert segs.shape == (3, 10)
    assert segs[2, 5:].sum() == 0 and segs[2, :5].sum() == 5
    assert segment_clip(AudioClip(np.ones(3), 10), 1.0).shape == (1, 10)
