"""Post-processing of segment predictions.

Two alternatives are provided. Penalization subtracts a share of each
species' training frequency from its probability. Class-wise thresholds
pick, per species, the quantile of its own score distribution that best
separates call from nocall segments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .metrics import NOCALL, binarized_auc

__all__ = [
    "PredictionTable",
    "PenaltyConfig",
    "ThresholdEntry",
    "ThresholdTable",
    "DEFAULT_QUANTILE_GRID",
    "penalize",
    "quantile_threshold",
    "fit_class_thresholds",
    "exhaustive_best_score",
    "apply_thresholds",
    "global_threshold_decisions",
    "ensemble",
    "read_predictions",
    "write_predictions",
    "read_thresholds",
    "write_thresholds",
    "write_decisions",
    "read_decisions",
    "score_histograms",
]

DEFAULT_QUANTILE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class PredictionTable:
    keys: list            # (recording, segment_index) pairs
    species: list
    probs: np.ndarray     # (n_rows, n_species)

    def __post_init__(self):
        self.keys = [(str(r), int(s)) for r, s in self.keys]
        self.species = list(self.species)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(len(self.keys), len(self.species))
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("duplicate (recording, segment) keys")
        if np.any((self.probs < 0) | (self.probs > 1)) or not np.all(np.isfinite(self.probs)):
            raise ValueError("probabilities must lie in [0, 1]")

    def column(self, species: str) -> np.ndarray:
        return self.probs[:, self.species.index(species)]


@dataclass(frozen=True)
class PenaltyConfig:
    penalty_factor: float
    distribution: tuple

    def __post_init__(self):
        if self.penalty_factor < 0:
            raise ValueError("penalty_factor must be >= 0")
        if sum(self.distribution) <= 0:
            raise ValueError("class distribution must have a positive total")


@dataclass(frozen=True)
class ThresholdEntry:
    species: str
    quantile: float
    threshold: float
    score: float


class ThresholdTable(dict):
    """species -> ThresholdEntry"""

    def thresholds(self, species) -> np.ndarray:
        return np.array([self[s].threshold for s in species])


def penalize(preds: PredictionTable, config: PenaltyConfig) -> PredictionTable:
    """p_i - factor * x_i / sum(x), clamped to [0, 1]."""
    x = np.asarray(config.distribution, dtype=np.float64)
    if x.shape != (len(preds.species),):
        raise ValueError(f"distribution has {x.size} entries for {len(preds.species)} species")
    penalty = config.penalty_factor * x / x.sum()
    return PredictionTable(list(preds.keys), list(preds.species), np.clip(preds.probs - penalty, 0.0, 1.0))


def quantile_threshold(scores, q: float) -> float:
    # inverted-CDF quantiles are always observed scores
    return float(np.quantile(np.asarray(scores, dtype=np.float64), q, method="inverted_cdf"))


def _call_labels(preds: PredictionTable, call_truth) -> np.ndarray:
    y = np.array([int(bool(call_truth[k])) for k in preds.keys])
    return y


def fit_class_thresholds(preds: PredictionTable, call_truth: dict, quantile_grid=DEFAULT_QUANTILE_GRID,
                         species=None) -> ThresholdTable:
    """Grid search over score quantiles, per species, for the best call/nocall split.

    ``call_truth`` maps each (recording, segment) key to True (some bird
    calls) or False (nocall), regardless of species. For each species and
    each grid quantile q, the threshold is the q-quantile of that species'
    scores; decisions ``p >= threshold`` are scored by (TPR + TNR) / 2.
    Ties go to the smallest q.
    """
    grid = list(quantile_grid)
    if not grid:
        raise ValueError("quantile grid is empty")
    if any(not 0.0 < q < 1.0 for q in grid) or grid != sorted(grid):
        raise ValueError("quantile grid must be ascending values in (0, 1)")
    missing = [k for k in preds.keys if k not in call_truth]
    if missing:
        raise KeyError(f"no call/nocall truth for {len(missing)} segments, e.g. {missing[0]}")
    y = _call_labels(preds, call_truth)
    species = preds.species if species is None else list(species)
    table = ThresholdTable()
    for sp in species:
        if y.all() or not y.any():
            raise ValueError(f"species {sp}: call/nocall truth has a single class, score undefined")
        scores = preds.column(sp)
        best = None
        for q in grid:
            tau = quantile_threshold(scores, q)
            s = binarized_auc(scores >= tau, y)
            if best is None or s > best.score:
                best = ThresholdEntry(sp, q, tau, s)
        table[sp] = best
    return table


def exhaustive_best_score(scores, call_labels) -> float:
    """Best (TPR + TNR) / 2 over thresholds at every distinct score value."""
    scores = np.asarray(scores, dtype=np.float64)
    return max(binarized_auc(scores >= t, call_labels) for t in np.unique(scores))


def apply_thresholds(preds: PredictionTable, table: ThresholdTable, scored=None) -> dict:
    """Segment decisions: species with p >= threshold, or {nocall} when none pass."""
    scored = list(table) if scored is None else list(scored)
    missing = [s for s in scored if s not in table]
    if missing:
        raise KeyError(f"no threshold for scored species {missing}")
    cols = [preds.species.index(s) for s in scored]
    tau = table.thresholds(scored)
    hits = preds.probs[:, cols] >= tau[None, :]
    out = {}
    for key, row in zip(preds.keys, hits):
        labels = frozenset(scored[j] for j in np.nonzero(row)[0])
        out[key] = labels or frozenset([NOCALL])
    return out


def global_threshold_decisions(preds: PredictionTable, threshold: float = 0.5, scored=None) -> dict:
    scored = list(preds.species) if scored is None else list(scored)
    table = ThresholdTable({s: ThresholdEntry(s, float("nan"), threshold, float("nan")) for s in scored})
    return apply_thresholds(preds, table, scored)


def ensemble(tables) -> PredictionTable:
    """Elementwise mean of aligned prediction tables."""
    tables = list(tables)
    if not tables:
        raise ValueError("nothing to ensemble")
    first = tables[0]
    for t in tables[1:]:
        if t.keys != first.keys:
            raise ValueError("prediction tables have different segment keys")
        if t.species != first.species:
            raise ValueError("prediction tables have different species order")
    if len(tables) == 1:
        return PredictionTable(list(first.keys), list(first.species), first.probs.copy())
    mean = np.mean(np.stack([t.probs for t in tables]), axis=0)
    return PredictionTable(list(first.keys), list(first.species), mean)


# ---------------------------------------------------------------- files

def _fmt(x: float) -> str:
    return repr(float(x))


def write_predictions(path, preds: PredictionTable) -> None:
    """Long form: recording,segment_index,species,probability."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording", "segment_index", "species", "probability"])
        for (rec, seg), row in zip(preds.keys, preds.probs):
            for sp, p in zip(preds.species, row):
                w.writerow([rec, seg, sp, _fmt(p)])


def read_predictions(path, species_order=None) -> PredictionTable:
    rows = {}
    seen_species = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["recording", "segment_index", "species", "probability"]:
            raise ValueError(f"{path}: header must be recording,segment_index,species,probability")
        for r in reader:
            key = (r["recording"], int(r["segment_index"]))
            sp = r["species"]
            if sp not in seen_species:
                seen_species.append(sp)
            rows.setdefault(key, {})[sp] = float(r["probability"])
    species = list(species_order) if species_order is not None else seen_species
    keys = list(rows)
    probs = np.zeros((len(keys), len(species)))
    for i, key in enumerate(keys):
        missing = [s for s in species if s not in rows[key]]
        if missing:
            raise ValueError(f"{path}: segment {key} lacks probabilities for {missing}")
        probs[i] = [rows[key][s] for s in species]
    return PredictionTable(keys, species, probs)


def write_thresholds(path, table: ThresholdTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["species", "quantile", "threshold", "score"])
        for sp, e in table.items():
            w.writerow([sp, _fmt(e.quantile), _fmt(e.threshold), _fmt(e.score)])


def read_thresholds(path) -> ThresholdTable:
    table = ThresholdTable()
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            table[r["species"]] = ThresholdEntry(r["species"], float(r["quantile"]),
                                                 float(r["threshold"]), float(r["score"]))
    return table


def write_decisions(path, decisions: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording", "segment_index", "labels"])
        for (rec, seg), labels in decisions.items():
            w.writerow([rec, seg, " ".join(sorted(labels))])


def read_decisions(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:3] != ["recording", "segment_index", "labels"]:
            raise ValueError(f"{path}: header must be recording,segment_index,labels")
        for r in reader:
            out[(r["recording"], int(r["segment_index"]))] = frozenset(r["labels"].split()) or frozenset([NOCALL])
    return out


def score_histograms(preds: PredictionTable, call_truth: dict, bins: int = 20):
    """Per-species score histograms split by call/nocall: rows of (species, lo, hi, n_call, n_nocall)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    y = _call_labels(preds, call_truth).astype(bool)
    rows = []
    for sp in preds.species:
        s = preds.column(sp)
        hc, _ = np.histogram(s[y], bins=edges)
        hn, _ = np.histogram(s[~y], bins=edges)
        for i in range(bins):
            rows.append((sp, edges[i], edges[i + 1], int(hc[i]), int(hn[i])))
    return rows
