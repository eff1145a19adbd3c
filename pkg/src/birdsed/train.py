"""Training loop: sample, forward, focal loss, backward, AdamW under a cosine schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import MixupPolicy, NoisePolicy, SpecAugmentPolicy
from .dataset import ClipLoader, SpeciesTable, batch_rng, sample_batch
from .dsp import SpectrogramParams, melspectrogram_batch
from .audio import crop_window
from .losses import LossConfig, weighted_clip_loss
from .metrics import f1
from .model import ModelConfig, Weights, backward, forward, init_weights
from .optim import OptimizerState, adamw_step, cosine_lr

__all__ = ["TrainConfig", "EpochStats", "TrainResult", "TrainingError", "train", "split_validation",
           "predict_clips"]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    steps_per_epoch: int = 20
    batch_size: int = 24
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    window_s: float = 30.0
    chunk_s: float = 5.0
    n_parts: int = 6
    val_fraction: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    mixup: MixupPolicy | None = field(default_factory=MixupPolicy)
    specaug: SpecAugmentPolicy | None = field(default_factory=lambda: SpecAugmentPolicy(fill_value="min"))
    noise: NoisePolicy | None = field(default_factory=NoisePolicy)
    params: SpectrogramParams = field(default_factory=SpectrogramParams)
    model: ModelConfig | None = None

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class EpochStats:
    epoch: int
    step: int
    lr: float
    loss: float
    val_micro_f1: float


@dataclass
class TrainResult:
    weights: Weights
    stats: list
    lr_log: list
    loss_log: list
    train_indices: list
    val_indices: list


def split_validation(recordings, fraction: float, seed: int):
    """Hold out floor(fraction * n) recordings per primary species."""
    rng = np.random.default_rng([int(seed), 7919])
    by_primary = {}
    for i, rec in enumerate(recordings):
        by_primary.setdefault(rec.primary, []).append(i)
    val = []
    for key in sorted(by_primary):
        idx = by_primary[key]
        n_val = int(np.floor(fraction * len(idx)))
        if n_val:
            val.extend(rng.choice(idx, size=n_val, replace=False).tolist())
    val = sorted(val)
    val_set = set(val)
    return [i for i in range(len(recordings)) if i not in val_set], val


def predict_clips(weights: Weights, recordings, config: TrainConfig, loader, batch: int = 8) -> np.ndarray:
    """Clip-level probabilities from a deterministic window of each recording."""
    out = []
    for start in range(0, len(recordings), batch):
        waves = []
        for k, rec in enumerate(recordings[start:start + batch]):
            rng = np.random.default_rng([int(config.seed), 104729, start + k])
            clip = crop_window(loader(rec.audio_path), config.window_s, rng)
            waves.append(np.asarray(clip.samples, dtype=np.float32))
        chunk_len = int(round(config.chunk_s * config.params.sample_rate))
        w = np.stack(waves)[:, : chunk_len * config.n_parts].reshape(-1, chunk_len)
        specs = melspectrogram_batch(w, config.params).reshape(len(waves), config.n_parts, config.params.n_mels, -1)
        out.append(forward(specs, weights, mode="eval").clip)
    return np.concatenate(out) if out else np.zeros((0, weights.config.n_classes))


def _validation_f1(weights, recordings, table, config, loader):
    if not recordings:
        return float("nan")
    probs = predict_clips(weights, recordings, config, loader)
    decisions, truth = {}, {}
    for i, rec in enumerate(recordings):
        decisions[i] = {table.species[k] for k in np.nonzero(probs[i] >= 0.5)[0]}
        truth[i] = set(rec.labels)
    return f1(decisions, truth, "micro")


def train(recordings, table: SpeciesTable, config: TrainConfig, noise_clips=None,
          log_path=None, loader=None, weights: Weights | None = None) -> TrainResult:
    """Train a model from scratch (or continue ``weights``); deterministic given ``config.seed``."""
    if not recordings:
        raise TrainingError("empty dataset")
    if config.total_steps <= 0:
        raise TrainingError("need at least one training step")
    model_cfg = config.model or ModelConfig(n_classes=len(table))
    if model_cfg.n_classes != len(table):
        model_cfg = replace(model_cfg, n_classes=len(table))
    loader = loader or ClipLoader(config.params.sample_rate)
    train_idx, val_idx = split_validation(recordings, config.val_fraction, config.seed)
    train_recs = [recordings[i] for i in train_idx]
    val_recs = [recordings[i] for i in val_idx]
    if weights is None:
        weights = init_weights(model_cfg, np.random.default_rng([int(config.seed), 1]))
    state = OptimizerState(
        lr_max=config.lr_max, lr_min=config.lr_min, betas=tuple(config.betas), eps=config.eps,
        weight_decay=config.weight_decay, total_steps=config.total_steps,
    )
    stats, lr_log, loss_log = [], [], []
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_fh:
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["epoch", "step", "lr", "loss", "val_micro_f1"])
    try:
        step = 0
        for epoch in range(config.epochs):
            epoch_losses = []
            for _ in range(config.steps_per_epoch):
                lr = cosine_lr(step, config.total_steps, config.lr_max, config.lr_min)
                rng = batch_rng(config.seed, step)
                batch = sample_batch(
                    train_recs, table, config.batch_size, config.mixup, rng, config.params,
                    config.window_s, config.chunk_s, config.n_parts, loader,
                    noise_clips, config.noise if noise_clips else None, config.specaug,
                )
                out, cache = forward(batch.specs, weights, mode="train", rng=rng, keep_cache=True)
                finite = bool(np.all(np.isfinite(out.clip)))
                if finite:
                    losses, dpred = weighted_clip_loss(out.clip, batch.labels, batch.ratings, config.loss)
                    loss = float(losses.sum())
                if not finite or not np.isfinite(loss):
                    ok = out.clip[np.isfinite(out.clip)]
                    seen = f"{ok.min():.3g}..{ok.max():.3g}" if ok.size else "all non-finite"
                    raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3g}, prediction range {seen})")
                grads = backward(dpred, cache, weights)
                adamw_step(weights.tensors, grads, state, lr)
                lr_log.append(lr)
                loss_log.append(loss)
                epoch_losses.append(loss)
                step += 1
            val = _validation_f1(weights, val_recs, table, config, loader)
            st = EpochStats(epoch, step, lr_log[-1], float(np.mean(epoch_losses)), val)
            stats.append(st)
            log.info("epoch %d step %d lr %.3g loss %.4f val micro-F1 %.3f",
                     st.epoch, st.step, st.lr, st.loss, st.val_micro_f1)
            if writer:
                writer.writerow([st.epoch, st.step, f"{st.lr:.9g}", f"{st.loss:.9g}", f"{st.val_micro_f1:.6f}"])
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(weights, stats, lr_log, loss_log, train_idx, val_idx)
