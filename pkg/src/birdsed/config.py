"""INI run configuration shared by every CLI command."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import MixupPolicy, NoisePolicy, SpecAugmentPolicy
from .calibrate import DEFAULT_QUANTILE_GRID
from .dataset import SynthConfig
from .dsp import SpectrogramParams
from .losses import LossConfig
from .model import BlockConfig, ModelConfig
from .train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "DEFAULT_CONFIG_TEXT"]


class ConfigError(ValueError):
    """Malformed or incomplete configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data_dir: Path
    out_dir: Path
    metadata: Path
    species: Path
    noise_dir: Path | None
    weights: Path
    params: SpectrogramParams = field(default_factory=SpectrogramParams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig | None = None
    quantile_grid: tuple = DEFAULT_QUANTILE_GRID
    penalty_factor: float = 0.8
    histogram_bins: int = 20
    infer_chunk_s: float = 5.0
    infer_workers: int = 1


def _coerce(name, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
    except (KeyError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    if name.endswith("fill_value"):
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def _build(cls, cp, section: str, base=None, skip=()):
    """Dataclass ``cls`` from an INI section; unknown keys are an error."""
    base = base if base is not None else cls()
    if not cp.has_section(section):
        return base
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, raw in cp.items(section):
        if key == "enabled":
            continue
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _coerce(f"[{section}] {key}", raw, getattr(base, key))
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _optional_policy(cls, cp, section: str, default):
    if cp.has_section(section) and not cp.getboolean(section, "enabled", fallback=True):
        return None
    base = default if default is not None else cls()
    return _build(cls, cp, section, base)


def _parse_blocks(text: str) -> tuple:
    try:
        return tuple(BlockConfig(*(int(v) for v in b.split(","))) for b in text.split(";") if b.strip())
    except (TypeError, ValueError):
        raise ConfigError(f"[model] blocks: expected 'channels,stride,pool;...', got {text!r}") from None


def parse_config(text: str, base_dir=".", seed: int | None = None, out_dir=None) -> RunConfig:
    """Parse INI ``text``; relative paths resolve against ``base_dir``.

    ``seed`` and ``out_dir`` override the file (the CLI's global flags).
    The seed is mandatory from one source or the other.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    known = {"run", "spectrogram", "synth", "train", "model", "loss", "mixup", "specaug", "noise",
             "calibrate", "infer"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    base_dir = Path(base_dir)
    run = cp["run"] if cp.has_section("run") else {}

    if seed is None:
        if "seed" not in run:
            raise ConfigError("a seed is required ([run] seed or --seed)")
        try:
            seed = int(run["seed"])
        except ValueError:
            raise ConfigError(f"[run] seed: not an integer: {run['seed']!r}") from None

    def path(key, default):
        raw = run.get(key, default)
        if raw is None or raw == "":
            return None
        p = Path(raw)
        return p if p.is_absolute() else base_dir / p

    data_dir = path("data_dir", "data")
    out = Path(out_dir) if out_dir is not None else path("out_dir", "out")
    metadata = path("metadata", None) or data_dir / "metadata.csv"
    species = path("species", None) or data_dir / "species.csv"
    noise_dir = path("noise_dir", None) or data_dir / "noise"
    weights = path("weights", None) or out / "weights.bin"

    params = _build(SpectrogramParams, cp, "spectrogram")
    synth = _build(SynthConfig, cp, "synth")

    model = None
    if cp.has_section("model"):
        sec = dict(cp.items("model"))
        blocks = _parse_blocks(sec.pop("blocks")) if "blocks" in sec else ModelConfig(1).blocks
        extra = {}
        for key, raw in sec.items():
            if key == "freq_coord":
                extra[key] = _coerce(f"[model] {key}", raw, True)
                continue
            if key not in {"attention_temperature", "dropout_rate", "bn_momentum", "bn_eps"}:
                raise ConfigError(f"[model] unknown key {key!r}")
            extra[key] = _coerce(f"[model] {key}", raw, 0.0)
        try:
            # n_classes is filled in from the species table at train time
            model = ModelConfig(n_classes=1, blocks=blocks, **extra)
        except ValueError as exc:
            raise ConfigError(f"[model] {exc}") from None

    defaults = TrainConfig()
    train = _build(TrainConfig, cp, "train", skip=("loss", "mixup", "specaug", "noise", "params", "model", "seed"))
    train = replace(
        train,
        seed=seed,
        params=params,
        model=model,
        loss=_build(LossConfig, cp, "loss"),
        mixup=_optional_policy(MixupPolicy, cp, "mixup", defaults.mixup),
        specaug=_optional_policy(SpecAugmentPolicy, cp, "specaug", defaults.specaug),
        noise=_optional_policy(NoisePolicy, cp, "noise", defaults.noise),
    )

    cal = cp["calibrate"] if cp.has_section("calibrate") else {}
    grid = DEFAULT_QUANTILE_GRID
    if "grid" in cal:
        try:
            grid = tuple(float(v) for v in cal["grid"].split(","))
        except ValueError:
            raise ConfigError(f"[calibrate] grid: {cal['grid']!r}") from None
    if any(b <= a for a, b in zip(grid, grid[1:])) or not all(0 <= q <= 1 for q in grid):
        raise ConfigError("[calibrate] grid must be strictly increasing within [0, 1]")
    penalty = _coerce("[calibrate] penalty_factor", cal.get("penalty_factor", "0.8"), 0.0)
    bins = _coerce("[calibrate] histogram_bins", cal.get("histogram_bins", "20"), 0)
    inf = cp["infer"] if cp.has_section("infer") else {}
    chunk = _coerce("[infer] chunk_s", inf.get("chunk_s", "5.0"), 0.0)
    workers = _coerce("[infer] workers", inf.get("workers", "1"), 0)
    if workers < 1 or chunk <= 0 or bins < 1:
        raise ConfigError("[infer] workers >= 1, chunk_s > 0 and [calibrate] histogram_bins >= 1 required")

    return RunConfig(seed, data_dir, out, metadata, species, noise_dir, weights, params, synth, train,
                     model, grid, penalty, bins, chunk, workers)


def load_config(path=None, seed: int | None = None, out_dir=None) -> RunConfig:
    """Read the INI file at ``path`` (or the built-in defaults when None)."""
    if path is None:
        return parse_config(DEFAULT_CONFIG_TEXT, ".", seed, out_dir)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent, seed, out_dir)


DEFAULT_CONFIG_TEXT = """\
[run]
data_dir = data
out_dir = out
"""
