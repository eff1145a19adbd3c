"""Penalty vs class-wise thresholds on hand-made predictions.

A head species is over-confident everywhere, a tail species is
under-confident on its own calls. No model is needed to see the effect.
"""

import numpy as np

from birdsed.calibrate import (
    PenaltyConfig,
    PredictionTable,
    apply_thresholds,
    fit_class_thresholds,
    global_threshold_decisions,
    penalize,
)
from birdsed.metrics import NOCALL, f1

rng = np.random.default_rng(3)
n = 60
truth = {}
probs = np.zeros((n, 2))
for i in range(n):
    kind = rng.choice(["head", "tail", NOCALL], p=[0.4, 0.2, 0.4])
    truth[("demo", i)] = {kind}
    probs[i, 0] = rng.uniform(0.75, 0.95) if kind == "head" else rng.uniform(0.4, 0.65)
    probs[i, 1] = rng.uniform(0.3, 0.45) if kind == "tail" else rng.uniform(0.05, 0.25)
preds = PredictionTable(list(truth), ["head", "tail"], probs)

base = global_threshold_decisions(preds, 0.5)
print("global 0.5    micro %.3f macro %.3f" % (f1(base, truth, "micro"), f1(base, truth, "macro")))

# penalty: the head species held 90% of the training recordings
pn = global_threshold_decisions(penalize(preds, PenaltyConfig(0.8, (90, 10))), 0.5)
print("penalized     micro %.3f macro %.3f" % (f1(pn, truth, "micro"), f1(pn, truth, "macro")))

# class-wise thresholds fitted on call/nocall only
calls = {k: NOCALL not in v for k, v in truth.items()}
table = fit_class_thresholds(preds, calls)
for e in table.values():
    print(f"  {e.species}: q={e.quantile} threshold={e.threshold:.3f} score={e.score:.3f}")
cw = apply_thresholds(preds, table)
print("class-wise    micro %.3f macro %.3f" % (f1(cw, truth, "micro"), f1(cw, truth, "macro")))
