"""Micro CNN with a sound-event-detection head, written directly in numpy.

Each 5 s chunk goes through a stack of conv blocks (3x3 conv, batch norm,
ReLU, 2x2 average pool). The remaining frequency axis is collapsed with
mean + max. Per-frame linear maps then give class logits and attention
logits. Clipwise probabilities are the attention-weighted average of the
framewise sigmoids, and a clip of several chunks takes the max over chunks.

Layers are plain functions returning ``(output, cache)`` with a matching
``*_backward``. That keeps every gradient independently checkable.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BlockConfig",
    "ModelConfig",
    "Weights",
    "ModelOutput",
    "ForwardCache",
    "WeightsFileError",
    "init_weights",
    "zero_weights",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "avgpool_forward",
    "avgpool_backward",
    "freq_reduce_forward",
    "freq_reduce_backward",
    "dropout_forward",
    "dropout_backward",
    "sed_head_forward",
    "sed_head_backward",
    "forward",
    "backward",
    "grad_cam",
    "save_weights",
    "load_weights",
]


@dataclass(frozen=True)
class BlockConfig:
    out_channels: int
    stride: int = 1
    pool: int = 2


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    blocks: tuple = (BlockConfig(16), BlockConfig(32))
    attention_temperature: float = 1.0
    dropout_rate: float = 0.2
    in_channels: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # constant mel-position channel: frequency pooling is otherwise blind to where a call sits
    freq_coord: bool = True

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(*b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValueError("need at least one conv block")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.attention_temperature <= 0:
            raise ValueError("attention_temperature must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_classes": str(self.n_classes),
            "blocks": ";".join(f"{b.out_channels},{b.stride},{b.pool}" for b in self.blocks),
            "attention_temperature": repr(self.attention_temperature),
            "dropout_rate": repr(self.dropout_rate),
            "in_channels": str(self.in_channels),
            "freq_coord": str(int(self.freq_coord)),
            "bn_momentum": repr(self.bn_momentum),
            "bn_eps": repr(self.bn_eps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        blocks = tuple(BlockConfig(*(int(v) for v in b.split(","))) for b in d["blocks"].split(";"))
        return cls(
            n_classes=int(d["n_classes"]),
            blocks=blocks,
            attention_temperature=float(d["attention_temperature"]),
            dropout_rate=float(d["dropout_rate"]),
            in_channels=int(d.get("in_channels", 1)),
            freq_coord=bool(int(d.get("freq_coord", 0))),
            bn_momentum=float(d.get("bn_momentum", 0.1)),
            bn_eps=float(d.get("bn_eps", 1e-5)),
        )

    def shapes(self) -> dict:
        out = {}
        c_in = self.in_channels + int(self.freq_coord)
        for i, b in enumerate(self.blocks):
            out[f"block{i}.conv.weight"] = (b.out_channels, c_in, 3, 3)
            for name in ("bn.weight", "bn.bias", "bn.running_mean", "bn.running_var"):
                out[f"block{i}.{name}"] = (b.out_channels,)
            c_in = b.out_channels
        out["head.cls.weight"] = (self.n_classes, c_in)
        out["head.cls.bias"] = (self.n_classes,)
        out["head.att.weight"] = (self.n_classes, c_in)
        out["head.att.bias"] = (self.n_classes,)
        return out


_BUFFERS = ("running_mean", "running_var")


@dataclass
class Weights:
    config: ModelConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def trainable(self) -> list:
        return [k for k in self.tensors if not k.endswith(_BUFFERS)]

    def copy(self) -> "Weights":
        return Weights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Weights":
        return Weights(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["head.cls.weight"].dtype


def init_weights(config: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                 prior: float = 0.1) -> Weights:
    """He-normal convs, small Gaussian head, identity batch norm.

    Class-logit biases start at logit(prior) so early predictions are not
    all 0.5 on a task where most labels are negative.
    """
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith("conv.weight"):
            fan_in = shape[1] * 9
            t = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(("bn.weight", "running_var")):
            t = np.ones(shape)
        elif name.startswith("head") and name.endswith("weight"):
            t = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        elif name == "head.cls.bias":
            t = np.full(shape, np.log(prior / (1.0 - prior)))
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(dtype)
    return Weights(config, tensors)


def zero_weights(config: ModelConfig, dtype=np.float32) -> Weights:
    tensors = {n: np.zeros(s, dtype=dtype) for n, s in config.shapes().items()}
    for n in tensors:
        if n.endswith("running_var"):
            tensors[n][:] = 1
    return Weights(config, tensors)


# ---------------------------------------------------------------- layers

def _out_size(n, stride):
    return (n - 1) // stride + 1


def _im2col(xp, stride, ho, wo):
    n, c = xp.shape[:2]
    v = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    v = v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)


def conv2d_forward(x, w, stride=1):
    """3x3 convolution with zero padding 1; x is (N, C, H, W)."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo)
    out = (cols @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (xp, w, stride, x.shape)


def conv2d_backward(dout, cache, need_dx=True):
    """Returns (dx, dw); dx is None when ``need_dx`` is false (first layer)."""
    xp, w, stride, x_shape = cache
    n, c, h, wd = x_shape
    o = w.shape[0]
    ho, wo = dout.shape[2:]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = _im2col(xp, stride, ho, wo)
    dw = (dmat.T @ cols).reshape(w.shape)
    del cols
    if not need_dx:
        return None, dw
    dcols = (dmat @ w.reshape(o, -1)).reshape(n, ho, wo, c, 3, 3)
    dxp = np.zeros(xp.shape, dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                dcols[..., i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, 1:-1, 1:-1], dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (N, H, W).

    Returns ``(out, cache, (new_running_mean, new_running_var))``; running
    statistics are only updated in train mode.
    """
    if train:
        axes = (0, 2, 3)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        new_stats = (
            (1 - momentum) * running_mean + momentum * mean,
            (1 - momentum) * running_var + momentum * unbiased,
        )
    else:
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, train), new_stats


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = (0, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = xhat.size // xhat.shape[1]
    sum_d = dxhat.sum(axis=axes)[None, :, None, None]
    sum_dx = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def avgpool_forward(x, k=2):
    """Non-overlapping k x k mean pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ValueError(f"feature map {h}x{w} too small for {k}x{k} pooling")
    out = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    return out, (x.shape, k)


def avgpool_backward(dout, cache):
    shape, k = cache
    n, c, ho, wo = dout.shape
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(dout, k, axis=2), k, axis=3) / (k * k)
    return dx


def freq_reduce_forward(x):
    """(N, C, H, T) -> (N, C, T): mean over H plus max over H."""
    idx = x.argmax(axis=2)
    mx = np.take_along_axis(x, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return x.mean(axis=2) + mx, (x.shape, idx)


def freq_reduce_backward(dout, cache):
    shape, idx = cache
    dx = np.broadcast_to(dout[:, :, None, :] / shape[2], shape).copy()
    np.put_along_axis(dx, idx[:, :, None, :],
                      np.take_along_axis(dx, idx[:, :, None, :], axis=2) + dout[:, :, None, :], axis=2)
    return dx


def dropout_forward(x, rate, rng):
    if rate == 0.0 or rng is None:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sed_head_forward(z, w_cls, b_cls, w_att, b_att, temperature=1.0):
    """Frame-level classifier plus attention pooling over time.

    z is (N, C, T). Returns ``(clipwise (N, K), segmentwise (N, K, T),
    attention (N, K, T), cache)``.
    """
    cls_logits = np.einsum("nct,kc->nkt", z, w_cls) + b_cls[None, :, None]
    att_logits = (np.einsum("nct,kc->nkt", z, w_att) + b_att[None, :, None]) / temperature
    att_logits = att_logits - att_logits.max(axis=2, keepdims=True)
    att = np.exp(att_logits)
    att /= att.sum(axis=2, keepdims=True)
    seg = _sigmoid(cls_logits)
    # a convex combination of values in [0, 1]; the clip only removes rounding overshoot
    clip = np.minimum((att * seg).sum(axis=2), 1.0)
    return clip, seg, att, (z, w_cls, w_att, seg, att, temperature)


def sed_head_backward(dclip, cache, dseg=None):
    z, w_cls, w_att, seg, att, temperature = cache
    dseg_total = dclip[:, :, None] * att
    if dseg is not None:
        dseg_total = dseg_total + dseg
    datt = dclip[:, :, None] * seg
    dc = dseg_total * seg * (1.0 - seg)
    da = att * (datt - (att * datt).sum(axis=2, keepdims=True)) / temperature
    grads = {
        "head.cls.weight": np.einsum("nkt,nct->kc", dc, z),
        "head.cls.bias": dc.sum(axis=(0, 2)),
        "head.att.weight": np.einsum("nkt,nct->kc", da, z),
        "head.att.bias": da.sum(axis=(0, 2)),
    }
    dz = np.einsum("nkt,kc->nct", dc, w_cls) + np.einsum("nkt,kc->nct", da, w_att)
    return dz, grads


# ---------------------------------------------------------------- model

@dataclass
class ModelOutput:
    clipwise: np.ndarray       # (B, P, K)
    segmentwise: np.ndarray    # (B, P, K, T')
    attention: np.ndarray      # (B, P, K, T')
    feature_map: np.ndarray    # (B, P, C, H', T') output of the last conv block
    clip: np.ndarray           # (B, K) max over chunks


@dataclass
class ForwardCache:
    shape: tuple
    blocks: list = field(default_factory=list)
    freq: tuple = None
    dropout: np.ndarray = None
    head: tuple = None
    chunk_argmax: np.ndarray = None


def _check_finite(weights: Weights):
    for name, t in weights.tensors.items():
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite values in weight tensor {name}")


def forward(x, weights: Weights, mode: str = "eval", rng=None, keep_cache: bool = False,
            update_stats: bool = True):
    """Run a batch of chunk stacks through the network.

    ``x`` is (B, P, n_mels, frames), or (B, n_mels, frames) for single chunks.
    In train mode batch norm uses batch statistics and, when
    ``update_stats`` is set, writes new running statistics into ``weights``;
    dropout is applied only when an ``rng`` is supplied.

    Returns ``ModelOutput`` and, with ``keep_cache``, a ``ForwardCache``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = weights.config
    x = np.asarray(x, dtype=weights.dtype)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected (batch, chunks, mels, frames), got shape {x.shape}")
    _check_finite(weights)
    b, p = x.shape[:2]
    train = mode == "train"
    h = x.reshape(b * p, cfg.in_channels, *x.shape[2:])
    if cfg.freq_coord:
        ramp = np.linspace(-1.0, 1.0, h.shape[2], dtype=h.dtype)
        coord = np.broadcast_to(ramp[None, None, :, None], (h.shape[0], 1) + h.shape[2:])
        h = np.concatenate([h, coord], axis=1)
    cache = ForwardCache(shape=x.shape)
    for i, blk in enumerate(cfg.blocks):
        h, c_conv = conv2d_forward(h, weights[f"block{i}.conv.weight"], blk.stride)
        h, c_bn, stats = batchnorm_forward(
            h, weights[f"block{i}.bn.weight"], weights[f"block{i}.bn.bias"],
            weights[f"block{i}.bn.running_mean"], weights[f"block{i}.bn.running_var"],
            train, cfg.bn_momentum, cfg.bn_eps,
        )
        if train and update_stats:
            weights[f"block{i}.bn.running_mean"] = stats[0].astype(weights.dtype)
            weights[f"block{i}.bn.running_var"] = stats[1].astype(weights.dtype)
        h, c_relu = relu_forward(h)
        h, c_pool = avgpool_forward(h, blk.pool)
        if keep_cache:
            cache.blocks.append((c_conv, c_bn, c_relu, c_pool))
    feature_map = h
    z, cache.freq = freq_reduce_forward(h)
    if train:
        z, cache.dropout = dropout_forward(z, cfg.dropout_rate, rng)
    clipwise, seg, att, cache.head = sed_head_forward(
        z, weights["head.cls.weight"], weights["head.cls.bias"],
        weights["head.att.weight"], weights["head.att.bias"], cfg.attention_temperature,
    )
    k = cfg.n_classes
    clipwise = clipwise.reshape(b, p, k)
    cache.chunk_argmax = clipwise.argmax(axis=1)
    out = ModelOutput(
        clipwise=clipwise,
        segmentwise=seg.reshape(b, p, k, -1),
        attention=att.reshape(b, p, k, -1),
        feature_map=feature_map.reshape(b, p, *feature_map.shape[1:]),
        clip=clipwise.max(axis=1),
    )
    if keep_cache:
        return out, cache
    return out


def _head_grad(dclip, cache: ForwardCache, k):
    """Route a clip-level gradient to the winning chunk and through the head."""
    b, p = cache.shape[:2]
    dclipwise = np.zeros((b, p, k), dtype=dclip.dtype)
    np.put_along_axis(dclipwise, cache.chunk_argmax[:, None, :], dclip[:, None, :], axis=1)
    dz, grads = sed_head_backward(dclipwise.reshape(b * p, k), cache.head)
    dz = dropout_backward(dz, cache.dropout)
    return freq_reduce_backward(dz, cache.freq), grads


def backward(dclip, cache: ForwardCache, weights: Weights) -> dict:
    """Exact gradients of a scalar loss given dloss/dclip (B, K)."""
    if cache is None or not cache.blocks:
        raise ValueError("backward needs the cache of a forward pass run with keep_cache=True")
    cfg = weights.config
    dclip = np.asarray(dclip, dtype=weights.dtype)
    dh, grads = _head_grad(dclip, cache, cfg.n_classes)
    for i in reversed(range(len(cfg.blocks))):
        c_conv, c_bn, c_relu, c_pool = cache.blocks[i]
        dh = avgpool_backward(dh, c_pool)
        dh = relu_backward(dh, c_relu)
        dh, grads[f"block{i}.bn.weight"], grads[f"block{i}.bn.bias"] = batchnorm_backward(dh, c_bn)
        dh, grads[f"block{i}.conv.weight"] = conv2d_backward(dh, c_conv, need_dx=i > 0)
    return {name: grads[name].astype(weights.dtype, copy=False) for name in weights.trainable()}


def grad_cam(spectrogram, weights: Weights, target_class: int) -> np.ndarray:
    """Grad-CAM heatmap over the last conv feature map for one chunk.

    Channel weights are the spatial mean of d clipwise[k] / d feature map;
    the map is ReLU(sum_c alpha_c A_c), min-max scaled to [0, 1].
    """
    cfg = weights.config
    if not 0 <= target_class < cfg.n_classes:
        raise ValueError(f"class index {target_class} outside [0, {cfg.n_classes})")
    spec = np.asarray(spectrogram)
    if spec.ndim != 2:
        raise ValueError("grad_cam takes a single (n_mels, frames) spectrogram")
    out, cache = forward(spec[None, None], weights, mode="eval", keep_cache=True)
    dclip = np.zeros((1, cfg.n_classes), dtype=weights.dtype)
    dclip[0, target_class] = 1.0
    dfeat, _ = _head_grad(dclip, cache, cfg.n_classes)
    feat = out.feature_map[0, 0]
    alpha = dfeat[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, feat, axes=(0, 0)), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.zeros_like(cam) if hi == 0 else np.ones_like(cam)


# ---------------------------------------------------------------- persistence

_MAGIC = "birdsed-weights"
_VERSION = 1


class WeightsFileError(ValueError):
    pass


def save_weights(weights: Weights, path) -> None:
    """Text header (format version, config, tensor table) then float32 payloads."""
    lines = [f"{_MAGIC} {_VERSION}"]
    lines += [f"config.{k}={v}" for k, v in weights.config.to_dict().items()]
    names = list(weights.config.shapes())
    for name in names:
        shape = weights[name].shape
        lines.append(f"tensor {name} {'x'.join(str(s) for s in shape) or 'scalar'}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for name in names:
        buf.write(np.ascontiguousarray(weights[name], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path, expected: ModelConfig | None = None) -> Weights:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise WeightsFileError(f"{path}: file too short")
    (hlen,) = struct.unpack("<I", data[:4])
    try:
        header = data[4:4 + hlen].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise WeightsFileError(f"{path}: corrupt header") from exc
    if not header or not header[0].startswith(_MAGIC + " "):
        raise WeightsFileError(f"{path}: not a weights file")
    version = int(header[0].split()[1])
    if version != _VERSION:
        raise WeightsFileError(f"{path}: format version {version}, expected {_VERSION}")
    cfg_items, table = {}, []
    for line in header[1:]:
        if line == "end":
            break
        if line.startswith("config."):
            key, _, value = line[len("config."):].partition("=")
            cfg_items[key] = value
        elif line.startswith("tensor "):
            _, name, dims = line.split(" ")
            table.append((name, () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))))
    else:
        raise WeightsFileError(f"{path}: header not terminated")
    config = ModelConfig.from_dict(cfg_items)
    if expected is not None:
        want = expected.shapes()
        have = dict(table)
        for name, shape in want.items():
            if have.get(name) != shape:
                raise WeightsFileError(
                    f"{path}: shape mismatch for {name}: file has {have.get(name)}, expected {shape}"
                )
    pos = 4 + hlen
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape)) * 4
        chunk = data[pos:pos + n]
        if len(chunk) != n:
            raise WeightsFileError(f"{path}: truncated payload at {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        pos += n
    if pos != len(data):
        raise WeightsFileError(f"{path}: {len(data) - pos} trailing bytes")
    if set(tensors) != set(config.shapes()):
        raise WeightsFileError(f"{path}: tensor set does not match config")
    for name, shape in config.shapes().items():
        if tensors[name].shape != shape:
            raise WeightsFileError(f"{path}: {name} has shape {tensors[name].shape}, config implies {shape}")
    return Weights(config, tensors)
