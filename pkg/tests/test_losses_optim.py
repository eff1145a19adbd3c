import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdsed.losses import LossConfig, focal_bce, rating_weight, smooth_labels, weighted_clip_loss
from birdsed.optim import OptimizerState, adamw_step, cosine_lr


def test_smooth_labels():
    np.testing.assert_array_equal(smooth_labels([1, 0, 0], 0.01), [1.0, 0.01, 0.01])
    np.testing.assert_array_equal(smooth_labels([1, 0, 1], 0.0), [1, 0, 1])
    np.testing.assert_array_equal(smooth_labels([1, 1], 0.3), [1, 1])
    with pytest.raises(ValueError):
        smooth_labels([0.5, 1], 0.01)


def test_focal_worked_values():
    assert focal_bce([0.5], [1.0], 0.0)[0] == pytest.approx(math.log(2))
    assert focal_bce([1 - 1e-12], [1.0], 2.0)[0] == pytest.approx(0.0, abs=1e-20)
    assert focal_bce([0.5], [1.0], 2.0)[0] == pytest.approx(0.25 * math.log(2))
    assert focal_bce([0.5], [1.0], 2.0)[0] == pytest.approx(0.1733, abs=1e-4)


def test_focal_errors():
    with pytest.raises(ValueError):
        focal_bce([1.2], [1.0])
    with pytest.raises(ValueError):
        focal_bce([0.5], [1.5])
    with pytest.raises(ValueError):
        LossConfig(smoothing_value=0.5)
    with pytest.raises(ValueError):
        LossConfig(focal_gamma=-1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gamma_zero_is_plain_bce(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, 7)
    y = rng.random(7)
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert focal_bce(p, y, 0.0)[0] == pytest.approx(bce, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 2.0]))
def test_focal_nonnegative_and_zero_at_target(seed, gamma):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 6).astype(float)
    p = rng.uniform(0.001, 0.999, 6)
    assert focal_bce(p, y, gamma)[0] >= 0
    assert focal_bce(y, y, gamma)[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
@pytest.mark.parametrize("seed", range(5))
def test_logit_gradient_matches_finite_differences(gamma, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, 6)
    y = smooth_labels(rng.integers(0, 2, 6), 0.01)
    sig = lambda v: 1 / (1 + np.exp(-v))
    p = sig(z)
    _, dp = focal_bce(p, y, gamma)
    analytic = dp * p * (1 - p)
    # five-point stencil: truncation O(h^4) keeps the oracle well below 1e-6
    h = 1e-3
    loss = lambda v: focal_bce(sig(v), y, gamma)[0]
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        num = (-loss(z + 2 * e) + 8 * loss(z + e) - 8 * loss(z - e) + loss(z - 2 * e)) / (12 * h)
        assert abs(num - analytic[k]) <= 1e-6 * max(abs(num), abs(analytic[k]), 1e-6)


def test_rating_weights():
    cfg = LossConfig()
    np.testing.assert_allclose(rating_weight([5.0, 2.5, 0.0], cfg), [1.0, 0.5, 0.5])
    assert rating_weight(0.0, LossConfig(unrated_default_weight=0.25)) == 0.25
    np.testing.assert_array_equal(rating_weight([1.0, 0.0], LossConfig(rating_weighting=False)), [1, 1])
    with pytest.raises(ValueError):
        rating_weight(6.0, cfg)


def test_weighted_loss_scales_exactly():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, (4, 5))
    t = rng.integers(0, 2, (4, 5))
    full, g_full = weighted_clip_loss(p, t, np.full(4, 5.0), LossConfig())
    half, g_half = weighted_clip_loss(p, t, np.full(4, 2.5), LossConfig())
    np.testing.assert_array_equal(half, full * 0.5)
    np.testing.assert_array_equal(g_half, g_full * 0.5)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3, 1e-6) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(50, 100, 1e-3, 1e-6) == pytest.approx((1e-3 + 1e-6) / 2)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-3, 1e-6)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3, 1e-6)


def test_adamw_first_step():
    w = {"w": np.array([2.0])}
    st_ = OptimizerState(weight_decay=0.0)
    adamw_step(w, {"w": np.array([1.0])}, st_, 0.1)
    assert w["w"][0] == pytest.approx(1.9, abs=1e-7)
    assert st_.step == 1


def test_adamw_zero_gradient_and_decay():
    w = {"w": np.array([1.0, -2.0])}
    adamw_step(w, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0), 0.1)
    np.testing.assert_array_equal(w["w"], [1.0, -2.0])
    st_ = OptimizerState(weight_decay=0.1)
    for _ in range(3):
        adamw_step(w, {"w": np.zeros(2)}, st_, 0.5)
    np.testing.assert_allclose(w["w"], np.array([1.0, -2.0]) * 0.95 ** 3)


def test_adamw_sign_symmetry():
    rng = np.random.default_rng(0)
    g = [rng.standard_normal(4) for _ in range(5)]
    w0 = rng.standard_normal(4)
    a, b = {"w": w0.copy()}, {"w": w0.copy()}
    sa, sb = OptimizerState(weight_decay=0.0), OptimizerState(weight_decay=0.0)
    for gi in g:
        adamw_step(a, {"w": gi}, sa, 0.01)
        adamw_step(b, {"w": -gi}, sb, 0.01)
    np.testing.assert_allclose(a["w"] - w0, -(b["w"] - w0), atol=1e-15)


def test_adamw_rejects_non_finite_and_leaves_weights():
    w = {"w": np.array([1.0, 2.0])}
    st_ = OptimizerState()
    with pytest.raises(FloatingPointError):
        adamw_step(w, {"w": np.array([np.nan, 0.0])}, st_, 0.1)
    np.testing.assert_array_equal(w["w"], [1.0, 2.0])
    assert st_.step == 0
