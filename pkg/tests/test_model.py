import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdsed.gradcheck import check_model_gradients, numerical_gradient, relative_error
from birdsed.losses import LossConfig, weighted_clip_loss
from birdsed.model import (
    BlockConfig,
    ModelConfig,
    WeightsFileError,
    avgpool_backward,
    avgpool_forward,
    backward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    forward,
    freq_reduce_backward,
    freq_reduce_forward,
    grad_cam,
    init_weights,
    load_weights,
    save_weights,
    sed_head_backward,
    sed_head_forward,
    zero_weights,
)

MICRO = ModelConfig(n_classes=3, blocks=((4, 1), (6, 1)), dropout_rate=0.0)
TOL = 1e-4


def _close(analytic, numeric):
    err = relative_error(analytic, numeric, floor=1e-8)
    assert err.max() < TOL, f"max relative error {err.max():.3g}"


def _project(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    out, cache = conv2d_forward(x, w, stride)
    r = _project(9, out.shape)
    dx, dw = conv2d_backward(r, cache)
    f = lambda: float(np.sum(r * conv2d_forward(x, w, stride)[0]))
    _close(dx, numerical_gradient(f, x))
    _close(dw, numerical_gradient(f, w))
    assert conv2d_backward(r, cache, need_dx=False)[0] is None


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    out, _ = conv2d_forward(x, w, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(5):
            for j in range(4):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 4, 5)) * 2 + 1
    g, b = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.random(2) + 0.5
    out, cache, _ = batchnorm_forward(x, g, b, rm, rv, train)
    r = _project(3, out.shape)
    dx, dg, db = batchnorm_backward(r, cache)
    f = lambda: float(np.sum(r * batchnorm_forward(x, g, b, rm, rv, train)[0]))
    _close(dx, numerical_gradient(f, x))
    _close(dg, numerical_gradient(f, g))
    _close(db, numerical_gradient(f, b))


def test_batchnorm_train_normalises():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 3, 5, 7)) * 4 - 2
    out, _, (rm, rv) = batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))


def test_pool_and_freq_reduce_gradients():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 6, 5))
    out, cache = avgpool_forward(x, 2)
    assert out.shape == (2, 3, 3, 2)
    r = _project(5, out.shape)
    f = lambda: float(np.sum(r * avgpool_forward(x, 2)[0]))
    _close(avgpool_backward(r, cache), numerical_gradient(f, x))

    out, cache = freq_reduce_forward(x)
    np.testing.assert_allclose(out, x.mean(axis=2) + x.max(axis=2))
    r = _project(6, out.shape)
    f = lambda: float(np.sum(r * freq_reduce_forward(x)[0]))
    _close(freq_reduce_backward(r, cache), numerical_gradient(f, x))


@pytest.mark.parametrize("temperature", [1.0, 0.5])
def test_head_gradients(temperature):
    rng = np.random.default_rng(7)
    z = rng.standard_normal((2, 4, 6))
    wc, bc = rng.standard_normal((3, 4)), rng.standard_normal(3)
    wa, ba = rng.standard_normal((3, 4)), rng.standard_normal(3)
    clip, *_, cache = sed_head_forward(z, wc, bc, wa, ba, temperature)
    r = _project(8, clip.shape)
    dz, grads = sed_head_backward(r, cache)
    f = lambda: float(np.sum(r * sed_head_forward(z, wc, bc, wa, ba, temperature)[0]))
    _close(dz, numerical_gradient(f, z))
    for name, p in [("cls.weight", wc), ("cls.bias", bc), ("att.weight", wa)]:
        _close(grads[f"head.{name}"], numerical_gradient(f, p))
    # softmax is shift invariant, so the attention bias has no gradient
    np.testing.assert_allclose(grads["head.att.bias"], 0, atol=1e-12)
    np.testing.assert_allclose(numerical_gradient(f, ba), 0, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_full_model_matches_finite_differences(seed, gamma):
    cfg = ModelConfig(n_classes=3, blocks=((3, 1), (4, 1)), dropout_rate=0.2)
    rng = np.random.default_rng(seed)
    w = init_weights(cfg, rng, dtype=np.float64)
    for name in w.trainable():
        w[name] = w[name] + 0.1 * rng.standard_normal(w[name].shape)
    x = rng.standard_normal((2, 2, 12, 10))
    targets = rng.integers(0, 2, (2, 3)).astype(float)
    ratings = np.array([0.0, 4.0])
    res = check_model_gradients(w, x, targets, ratings, LossConfig(focal_gamma=gamma))
    for name, (a, n, kinks) in res.items():
        err = relative_error(a, n)
        assert err.max() < TOL, f"{name}: {err.max():.3g} (kinks {kinks.sum()})"


def test_zero_network_outputs_half():
    w = zero_weights(MICRO)
    out = forward(np.random.default_rng(0).standard_normal((2, 3, 16, 12)), w)
    np.testing.assert_allclose(out.segmentwise, 0.5)
    np.testing.assert_allclose(out.clipwise, 0.5)
    np.testing.assert_allclose(out.attention, 1.0 / out.attention.shape[-1])


def test_zero_loss_gradient_gives_zero_grads():
    w = init_weights(MICRO, np.random.default_rng(0), dtype=np.float64)
    out, cache = forward(np.random.default_rng(1).standard_normal((2, 2, 16, 12)), w, "train",
                         keep_cache=True)
    grads = backward(np.zeros_like(out.clip), cache, w)
    assert all(not g.any() for g in grads.values())
    with pytest.raises(ValueError):
        backward(np.zeros_like(out.clip), None, w)


def test_duplicate_item_doubles_gradient_in_eval_stats():
    # eval-mode statistics keep items independent, so the sum is additive
    w = init_weights(MICRO, np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((1, 2, 16, 12))
    g1 = _grads_eval(w, x)
    g2 = _grads_eval(w, np.concatenate([x, x]))
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-14)


def _grads_eval(w, x):
    out, cache = forward(x, w, "eval", keep_cache=True)
    return backward(np.ones_like(out.clip), cache, w)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_output_invariants(seed):
    rng = np.random.default_rng(seed)
    w = init_weights(MICRO, rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 16, 12)) * 10
    out = forward(x, w)
    assert np.all((out.clipwise >= 0) & (out.clipwise <= 1))
    np.testing.assert_allclose(out.attention.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose((out.attention * out.segmentwise).sum(axis=-1), out.clipwise, atol=1e-6)
    perm = rng.permutation(3)
    np.testing.assert_array_equal(forward(x[:, perm], w).clip, out.clip)


def test_eval_is_deterministic_and_single_chunk_identity():
    w = init_weights(MICRO, np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((2, 16, 12)).astype(np.float32)
    a, b = forward(x, w).clip, forward(x, w).clip
    assert np.array_equal(a, b)
    np.testing.assert_array_equal(forward(x[:, None], w).clip, forward(x, w).clipwise[:, 0])


def test_forward_errors():
    w = init_weights(MICRO, np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(np.zeros((16, 12)), w)
    with pytest.raises(ValueError):
        forward(np.zeros((1, 16, 12)), w, mode="test")
    bad = w.copy()
    bad["head.cls.weight"][0, 0] = np.nan
    with pytest.raises(ValueError):
        forward(np.zeros((1, 16, 12)), bad)


def test_train_mode_updates_running_stats_only_when_asked():
    w = init_weights(MICRO, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 16, 12)) + 3
    before = w["block0.bn.running_mean"].copy()
    forward(x, w, "train", update_stats=False)
    np.testing.assert_array_equal(w["block0.bn.running_mean"], before)
    forward(x, w, "train")
    assert not np.array_equal(w["block0.bn.running_mean"], before)


def test_grad_cam_range_and_zero_network():
    x = np.random.default_rng(0).standard_normal((16, 12))
    assert not grad_cam(x, zero_weights(MICRO), 1).any()
    w = init_weights(MICRO, np.random.default_rng(1))
    h = grad_cam(x, w, 0)
    assert h.shape == (4, 3)
    assert h.min() >= 0 and h.max() <= 1
    with pytest.raises(ValueError):
        grad_cam(x, w, 3)


def test_weights_round_trip(tmp_path):
    w = init_weights(MICRO, np.random.default_rng(0))
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_weights(w, p1)
    loaded = load_weights(p1)
    save_weights(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = np.random.default_rng(1).standard_normal((1, 16, 12)).astype(np.float32)
    assert np.array_equal(forward(x, w).clip, forward(x, loaded).clip)
    assert loaded.config == MICRO


def test_weights_file_errors(tmp_path):
    w = init_weights(MICRO, np.random.default_rng(0))
    p = tmp_path / "w.bin"
    save_weights(w, p)
    with pytest.raises(WeightsFileError):
        load_weights(p, expected=ModelConfig(n_classes=5, blocks=MICRO.blocks))
    data = p.read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-10])
    with pytest.raises(WeightsFileError):
        load_weights(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(data + b"\0")
    with pytest.raises(WeightsFileError):
        load_weights(tmp_path / "x.bin")
    (tmp_path / "v.bin").write_bytes(data.replace(b"birdsed-weights 1", b"birdsed-weights 9"))
    with pytest.raises(WeightsFileError):
        load_weights(tmp_path / "v.bin")


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(n_classes=0)
    with pytest.raises(ValueError):
        ModelConfig(n_classes=2, blocks=())
    cfg = ModelConfig(n_classes=4, blocks=(BlockConfig(8, 2), BlockConfig(16)))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
