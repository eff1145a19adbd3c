import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdsed.calibrate import (
    DEFAULT_QUANTILE_GRID,
    PenaltyConfig,
    PredictionTable,
    ThresholdEntry,
    ThresholdTable,
    apply_thresholds,
    ensemble,
    exhaustive_best_score,
    fit_class_thresholds,
    global_threshold_decisions,
    penalize,
    quantile_threshold,
    read_decisions,
    read_predictions,
    read_thresholds,
    score_histograms,
    write_decisions,
    write_predictions,
    write_thresholds,
)
from birdsed.metrics import NOCALL, binarized_auc


def _table(probs, species=None):
    probs = np.asarray(probs, dtype=float)
    species = species or [f"s{i}" for i in range(probs.shape[1])]
    return PredictionTable([("r", i) for i in range(len(probs))], species, probs)


def test_penalize_worked_example():
    out = penalize(_table([[0.9, 0.9]]), PenaltyConfig(0.8, (3, 1)))
    assert out.probs[0, 0] == pytest.approx(0.3, abs=1e-15)
    assert out.probs[0, 1] == pytest.approx(0.7, abs=1e-15)
    # the exact value of the formula, bit for bit
    assert out.probs[0, 0] == 0.9 - 0.8 * 3 / 4
    assert out.probs[0, 1] == 0.9 - 0.8 * 1 / 4


def test_penalize_identity_and_clamp():
    t = _table([[0.2, 0.7], [0.05, 0.99]])
    assert np.array_equal(penalize(t, PenaltyConfig(0.0, (5, 1))).probs, t.probs)
    assert penalize(_table([[0.1]]), PenaltyConfig(0.8, (1,))).probs[0, 0] == 0.0
    with pytest.raises(ValueError):
        penalize(t, PenaltyConfig(0.8, (1, 2, 3)))
    with pytest.raises(ValueError):
        PenaltyConfig(-0.1, (1,))
    with pytest.raises(ValueError):
        PenaltyConfig(0.5, (0, 0))


def test_penalize_composition_on_unclamped_instances():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        k = int(rng.integers(1, 6))
        x = tuple(rng.integers(1, 20, k).tolist())
        f, g = rng.uniform(0, 0.3, 2)
        probs = rng.uniform(0.65, 1.0, (4, k))
        shares = np.asarray(x) / sum(x)
        if np.any(probs - (f + g) * shares <= 0):
            continue
        t = _table(probs)
        two = penalize(penalize(t, PenaltyConfig(f, x)), PenaltyConfig(g, x))
        one = penalize(t, PenaltyConfig(f + g, x))
        np.testing.assert_allclose(two.probs, one.probs, atol=1e-15)
        checked += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_penalize_keeps_ranks_within_species(seed):
    rng = np.random.default_rng(seed)
    probs = rng.uniform(0.5, 1.0, (12, 3))
    out = penalize(_table(probs), PenaltyConfig(0.4, (1, 2, 3))).probs
    for k in range(3):
        assert np.array_equal(np.argsort(out[:, k], kind="stable"), np.argsort(probs[:, k], kind="stable"))


def test_separable_species_gets_perfect_score():
    call = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 0])
    t = _table(np.where(call, 0.9, 0.1)[:, None])
    truth = {k: bool(c) for k, c in zip(t.keys, call)}
    grid = [round(0.1 * i, 1) for i in range(1, 10)]
    e = fit_class_thresholds(t, truth, grid)["s0"]
    assert e.score == 1.0
    assert 0.1 < e.threshold <= 0.9
    assert exhaustive_best_score(t.probs[:, 0], call) == 1.0


def test_constant_scores_pick_smallest_quantile():
    t = _table(np.full((6, 1), 0.3))
    truth = {k: i % 2 == 0 for i, k in enumerate(t.keys)}
    e = fit_class_thresholds(t, truth)["s0"]
    assert e.score == 0.5 and e.quantile == DEFAULT_QUANTILE_GRID[0]


def test_fit_errors():
    t = _table(np.random.default_rng(0).random((4, 2)))
    with pytest.raises(ValueError):
        fit_class_thresholds(t, {k: True for k in t.keys})
    with pytest.raises(ValueError):
        fit_class_thresholds(t, {k: i < 2 for i, k in enumerate(t.keys)}, [])
    with pytest.raises(ValueError):
        fit_class_thresholds(t, {k: i < 2 for i, k in enumerate(t.keys)}, [0.5, 0.2])
    with pytest.raises(KeyError):
        fit_class_thresholds(t, {t.keys[0]: True})


def _random_instance(rng):
    n = int(rng.integers(4, 20))
    # coarse rounding makes tied scores common
    scores = np.round(rng.random(n), int(rng.integers(1, 3)))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    return scores, y


def test_fit_matches_exhaustive_search():
    rng = np.random.default_rng(7)
    for _ in range(50):
        scores, y = _random_instance(rng)
        t = _table(scores[:, None])
        truth = {k: bool(v) for k, v in zip(t.keys, y)}
        e = fit_class_thresholds(t, truth)["s0"]
        assert e.score == exhaustive_best_score(scores, y)
        assert e.score >= binarized_auc(scores >= 0.5, y)


def test_quantile_threshold_is_an_observed_score():
    rng = np.random.default_rng(1)
    s = rng.random(13)
    for q in DEFAULT_QUANTILE_GRID:
        assert quantile_threshold(s, q) in s


def test_apply_thresholds_examples():
    t = _table([[0.8, 0.1], [0.2, 0.3], [0.6, 0.7]])
    table = ThresholdTable({s: ThresholdEntry(s, 0.5, 0.5, 1.0) for s in t.species})
    d = apply_thresholds(t, table)
    assert d[("r", 0)] == {"s0"}
    assert d[("r", 1)] == {NOCALL}
    assert d[("r", 2)] == {"s0", "s1"}
    zero = ThresholdTable({s: ThresholdEntry(s, 0.05, 0.0, 0.5) for s in t.species})
    assert all(v == {"s0", "s1"} for v in apply_thresholds(t, zero).values())
    with pytest.raises(KeyError):
        apply_thresholds(t, ThresholdTable({"s0": table["s0"]}), scored=["s0", "s1"])
    assert global_threshold_decisions(t, 0.5) == d


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nocall_never_mixed_with_species(seed):
    rng = np.random.default_rng(seed)
    t = _table(rng.random((10, 3)))
    table = ThresholdTable({s: ThresholdEntry(s, 0.5, float(rng.random()), 1.0) for s in t.species})
    for labels in apply_thresholds(t, table).values():
        assert labels == {NOCALL} or NOCALL not in labels


def test_ensemble():
    a = _table([[0.2, 0.4]])
    b = _table([[0.4, 0.6]])
    np.testing.assert_allclose(ensemble([a, b]).probs, [[0.3, 0.5]])
    assert np.array_equal(ensemble([a]).probs, a.probs)
    assert np.array_equal(ensemble([a, a]).probs, a.probs)
    with pytest.raises(ValueError):
        ensemble([a, _table([[0.2, 0.4]], species=["x", "y"])])
    with pytest.raises(ValueError):
        ensemble([])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ensemble_bounded(seed):
    rng = np.random.default_rng(seed)
    ts = [_table(rng.random((5, 3))) for _ in range(int(rng.integers(1, 5)))]
    m = ensemble(ts).probs
    stack = np.stack([t.probs for t in ts])
    assert np.all(m >= stack.min(axis=0) - 1e-15) and np.all(m <= stack.max(axis=0) + 1e-15)


def test_prediction_table_validation():
    with pytest.raises(ValueError):
        PredictionTable([("r", 0), ("r", 0)], ["a"], [[0.1], [0.2]])
    with pytest.raises(ValueError):
        PredictionTable([("r", 0)], ["a"], [[1.5]])


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(3)
    t = _table(rng.random((4, 3)))
    write_predictions(tmp_path / "p.csv", t)
    back = read_predictions(tmp_path / "p.csv")
    assert back.keys == t.keys and back.species == t.species
    assert np.array_equal(back.probs, t.probs)

    truth = {k: i % 2 == 0 for i, k in enumerate(t.keys)}
    table = fit_class_thresholds(t, truth)
    write_thresholds(tmp_path / "t.csv", table)
    assert read_thresholds(tmp_path / "t.csv") == table

    d = apply_thresholds(t, table)
    write_decisions(tmp_path / "d.csv", d)
    assert read_decisions(tmp_path / "d.csv") == d


def test_score_histograms_count_every_segment():
    rng = np.random.default_rng(4)
    t = _table(rng.random((9, 2)))
    truth = {k: i < 4 for i, k in enumerate(t.keys)}
    rows = score_histograms(t, truth, bins=5)
    assert len(rows) == 10
    for sp in t.species:
        mine = [r for r in rows if r[0] == sp]
        assert sum(r[3] for r in mine) == 4 and sum(r[4] for r in mine) == 5
