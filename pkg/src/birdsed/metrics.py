"""Rank AUC, binarized AUC and micro/macro F1 over segment label sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "NOCALL",
    "ConfusionCounts",
    "auc",
    "binarized_auc",
    "confusion_counts",
    "f1",
    "f1_report",
]

NOCALL = "nocall"


def _check_binary(labels):
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("need at least one positive and one negative label")
    return y.astype(bool), n_pos, len(y) - n_pos


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    y, n_pos, n_neg = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    # doubled average ranks are integers, which keeps the statistic exact
    ranks2 = np.rint(2 * rankdata(s)).astype(np.int64)
    u2 = int(ranks2[y].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def binarized_auc(decisions, labels) -> float:
    """(TPR + TNR) / 2 of hard 0/1 decisions."""
    y, n_pos, n_neg = _check_binary(labels)
    d = np.asarray(decisions).astype(bool)
    tpr = np.count_nonzero(d & y) / n_pos
    tnr = np.count_nonzero(~d & ~y) / n_neg
    return (tpr + tnr) / 2.0


@dataclass
class ConfusionCounts:
    classes: list
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)

    def f1(self, cls) -> float:
        tp, fp, fn = self.tp[cls], self.fp[cls], self.fn[cls]
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else 0.0

    def precision(self, cls) -> float:
        d = self.tp[cls] + self.fp[cls]
        return self.tp[cls] / d if d else 0.0

    def recall(self, cls) -> float:
        d = self.tp[cls] + self.fn[cls]
        return self.tp[cls] / d if d else 0.0


def _as_set(labels):
    if isinstance(labels, str):
        labels = labels.split()
    s = frozenset(labels)
    return s if s else frozenset([NOCALL])


def confusion_counts(decisions: dict, truth: dict) -> ConfusionCounts:
    """Per-class TP/FP/FN; empty label sets count as ``nocall``."""
    missing = sorted(set(truth) - set(decisions))
    extra = sorted(set(decisions) - set(truth))
    if missing or extra:
        raise KeyError(f"segment keys differ: missing decisions {missing}, unexpected {extra}")
    pred = {k: _as_set(v) for k, v in decisions.items()}
    true = {k: _as_set(v) for k, v in truth.items()}
    classes = sorted(set().union(*pred.values(), *true.values())) if true else []
    cc = ConfusionCounts(classes, {c: 0 for c in classes}, {c: 0 for c in classes}, {c: 0 for c in classes})
    for key, t in true.items():
        p = pred[key]
        for c in p & t:
            cc.tp[c] += 1
        for c in p - t:
            cc.fp[c] += 1
        for c in t - p:
            cc.fn[c] += 1
    return cc


def f1(decisions: dict, truth: dict, mode: str = "micro") -> float:
    """Micro (pooled counts) or macro (mean per-class) F1; nocall is a class."""
    cc = confusion_counts(decisions, truth)
    if mode == "micro":
        tp = sum(cc.tp.values())
        fp = sum(cc.fp.values())
        fn = sum(cc.fn.values())
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else 0.0
    if mode == "macro":
        if not cc.classes:
            return 0.0
        return float(np.mean([cc.f1(c) for c in cc.classes]))
    raise ValueError(f"mode must be 'micro' or 'macro', got {mode!r}")


def f1_report(decisions: dict, truth: dict) -> list:
    """Rows of (name, tp, fp, fn, precision, recall, f1), per class then micro and macro."""
    cc = confusion_counts(decisions, truth)
    rows = [(c, cc.tp[c], cc.fp[c], cc.fn[c], cc.precision(c), cc.recall(c), cc.f1(c)) for c in cc.classes]
    tp, fp, fn = sum(cc.tp.values()), sum(cc.fp.values()), sum(cc.fn.values())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    rows.append(("micro", tp, fp, fn, p, r, f1(decisions, truth, "micro")))
    mp = float(np.mean([cc.precision(c) for c in cc.classes])) if cc.classes else 0.0
    mr = float(np.mean([cc.recall(c) for c in cc.classes])) if cc.classes else 0.0
    rows.append(("macro", tp, fp, fn, mp, mr, f1(decisions, truth, "macro")))
    return rows
