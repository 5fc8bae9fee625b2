import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

import ascfusion.nn.train as train_mod
from ascfusion.errors import ConfigError, DataError
from ascfusion.nn.gradcheck import check_layer, check_network, relative_error
from ascfusion.nn.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    ParallelConv2D,
    ReLU,
    cross_entropy,
    softmax,
)
from ascfusion.nn.network import FILTER_CONFIGURATIONS, Network, NetworkConfig, build_network, parameter_count
from ascfusion.nn.optim import Adam
from ascfusion.nn.train import TrainingConfig, TrainingHistory, train, validation_split

F64 = np.float64
TOL = 1e-4

# small network with the full layer chain, for fast training-loop tests
SMALL = NetworkConfig(groups=((2, 3, 8), (2, 3, 16)), conv2_filters=3, classes=3)


# --- conv forward against scipy ------------------------------------------------


@pytest.mark.parametrize("c,o,kernel,padding,shape", [
    (1, 3, (3, 8), "same", (2, 9, 30)),
    (1, 2, (3, 50), "same", (2, 6, 70)),   # wide single-channel kernel
    (4, 3, (5, 5), "valid", (2, 9, 12)),
    (2, 2, (3, 3), "same", (1, 50, 60)),   # large map: per-sample products
])
def test_conv_matches_scipy_correlate(c, o, kernel, padding, shape, rng):
    conv = Conv2D(c, o, kernel, padding, rng=rng, dtype=F64)
    conv.params["b"][:] = rng.normal(size=o)
    x = rng.normal(size=(shape[0], c) + shape[1:])
    y = conv.forward(x)
    mode = "same" if padding == "same" else "valid"
    W = conv.params["W"]
    for i in range(x.shape[0]):
        for j in range(o):
            ref = sum(_correlate(x[i, ch], W[j, ch], mode) for ch in range(c)) + conv.params["b"][j]
            np.testing.assert_allclose(y[i, j], ref, atol=1e-10)


def _correlate(x, w, mode):
    if mode == "valid":
        return signal.correlate(x, w, mode="valid")
    kt, kf = w.shape
    # zero padding: extra zero goes after for even extents
    pt, pf = (kt - 1) // 2, (kf - 1) // 2
    xp = np.pad(x, ((pt, kt - 1 - pt), (pf, kf - 1 - pf)))
    return signal.correlate(xp, w, mode="valid")


@given(kt=st.integers(1, 4), kf=st.integers(1, 6), t=st.integers(4, 9), f=st.integers(6, 12),
       seed=st.integers(0, 10_000))
def test_same_padding_preserves_shape(kt, kf, t, f, seed):
    rng = np.random.default_rng(seed)
    conv = Conv2D(2, 3, (kt, kf), "same", rng=rng, dtype=F64)
    x = rng.normal(size=(1, 2, t, f))
    assert conv.forward(x).shape == (1, 3, t, f)
    assert conv.output_shape((2, t, f)) == (3, t, f)


def test_bad_conv_configs():
    with pytest.raises(ConfigError):
        Conv2D(1, 0, (3, 3))
    with pytest.raises(ConfigError):
        Conv2D(1, 2, (3, 3), padding="full")


# --- per-layer finite differences ------------------------------------------------------


@pytest.mark.parametrize("make,shape", [
    (lambda r: Conv2D(2, 3, (3, 4), "same", l2=1e-3, rng=r, dtype=F64), (3, 2, 5, 7)),
    (lambda r: Conv2D(3, 2, (2, 3), "valid", rng=r, dtype=F64), (2, 3, 5, 6)),
    (lambda r: Conv2D(1, 2, (2, 49), "same", rng=r, dtype=F64), (2, 1, 4, 52)),
    (lambda r: ParallelConv2D([Conv2D(1, 2, (3, 3), rng=r, dtype=F64),
                               Conv2D(1, 1, (3, 6), rng=r, dtype=F64)]), (2, 1, 4, 8)),
    (lambda r: BatchNorm(3, dtype=F64), (4, 3, 3, 5)),
    (lambda r: MaxPool2D((2, 3)), (2, 2, 5, 7)),
    (lambda r: ReLU(), (2, 3, 4)),
    (lambda r: Flatten(), (2, 3, 2, 2)),
    (lambda r: Dense(6, 4, rng=r, dtype=F64), (5, 6)),
])
def test_layer_gradients(make, shape, rng):
    layer = make(rng)
    for name, p in layer.params.items():  # non-zero biases / affine terms
        p += rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=shape)
    if isinstance(layer, (ReLU, MaxPool2D)):
        # keep inputs away from kinks and ties so the difference quotient is a derivative
        x = np.sign(x) * (0.1 + np.abs(x)) + 1e-3 * np.arange(x.size).reshape(shape)
    errors = check_layer(layer, x, rng)
    assert max(errors.values()) < TOL, errors


def test_batchnorm_inference_uses_running_stats(rng):
    bn = BatchNorm(2, momentum=0.5, dtype=F64)
    x = rng.normal(3.0, 2.0, size=(64, 2, 3, 3))
    bn.forward(x, train=True)
    mean = bn.buffers["running_mean"]
    np.testing.assert_allclose(mean, 0.5 * x.mean(axis=(0, 2, 3)))
    y1 = bn.forward(x[:1], train=False)
    y2 = bn.forward(x[:1], train=False)
    np.testing.assert_array_equal(y1, y2)


def test_maxpool_floors_and_routes(rng):
    pool = MaxPool2D((5, 5))
    assert pool.output_shape((3, 75, 128)) == (3, 15, 25)
    assert MaxPool2D((11, 4)).output_shape((224, 11, 21)) == (224, 1, 5)
    x = rng.normal(size=(1, 1, 7, 7))
    y = pool.forward(x, train=True)
    assert y[0, 0, 0, 0] == x[0, 0, :5, :5].max()
    g = pool.backward(np.ones_like(y))
    assert g.sum() == 1.0 and g[0, 0, 5:, :].sum() == 0


def test_softmax_and_cross_entropy():
    p = softmax(np.array([[0.0, 0.0], [1000.0, 0.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5], [1.0, 0.0]])
    assert cross_entropy(np.array([[1.0, 0.0]]), np.array([0])) == pytest.approx(0.0, abs=1e-12)


# --- network ------------------------------------------------------------------


def test_parameter_counts():
    assert parameter_count(NetworkConfig("CNN_4")) == 656_639
    assert parameter_count(NetworkConfig("CNN_sq")) == 647_823
    for name in FILTER_CONFIGURATIONS:
        assert 647_000 <= parameter_count(NetworkConfig(name)) <= 661_000


def test_unknown_configuration():
    with pytest.raises(ConfigError, match="CNN_9"):
        build_network(NetworkConfig("CNN_9"))


def test_spatial_chain_and_dense_input():
    net = build_network(NetworkConfig("CNN_4"))
    dense = net.layers[-1]
    assert dense.params["W"].shape[0] == 224 * 5
    assert net.layers[-1].params["W"].shape[1] == 15


def test_output_rows_are_distributions(rng):
    net = build_network(SMALL, seed=1)
    p = net.forward(rng.normal(size=(5, 75, 128)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_duplicated_rows_identical(rng):
    net = build_network(SMALL, seed=1)
    x = rng.normal(size=(1, 75, 128))
    p = net.predict_proba(np.concatenate([x, x, x]))
    assert np.array_equal(p[0], p[1]) and np.array_equal(p[1], p[2])


def test_zero_dense_gives_uniform(rng):
    net = build_network(NetworkConfig("CNN_4"), seed=0)
    for p in net.layers[-1].params.values():
        p[...] = 0
    np.testing.assert_allclose(net.forward(rng.normal(size=(2, 75, 128))), 1 / 15, atol=1e-7)


def test_wrong_input_shape(rng):
    net = build_network(SMALL)
    with pytest.raises(DataError):
        net.forward(rng.normal(size=(2, 70, 128)))


def test_predict_segments_needs_seven(rng):
    net = build_network(SMALL)
    assert net.predict_segments(rng.normal(size=(7, 75, 128))).shape == (7, 3)
    same = net.predict_segments(np.repeat(rng.normal(size=(1, 75, 128)), 7, axis=0))
    assert np.all(same == same[0])
    with pytest.raises(DataError):
        net.predict_segments(rng.normal(size=(6, 75, 128)))


def test_duplicated_batch_same_loss(rng):
    net = build_network(SMALL, seed=2, dtype=F64)
    x = rng.normal(size=(1, 75, 128))
    a = net.loss(x, [1], train=False)
    b = net.loss(np.repeat(x, 4, axis=0), [1] * 4, train=False)
    assert a == pytest.approx(b, rel=1e-12)


def test_confident_prediction_leaves_only_l2(rng):
    net = build_network(SMALL, seed=2, dtype=F64)
    dense = net.layers[-1]
    dense.params["W"][...] = 0
    dense.params["b"][...] = [0.0, 100.0, 0.0]
    loss = net.loss(rng.normal(size=(2, 75, 128)), [1, 1], train=False)
    assert loss == pytest.approx(net.l2_penalty(), abs=1e-12)


@pytest.mark.parametrize("pre", [False, True])
def test_composed_network_gradient(pre, rng):
    cfg = NetworkConfig("CNN_4", pre_activation=pre)
    net = build_network(cfg, seed=3, dtype=F64)
    x = rng.normal(size=(4, 75, 128))
    errors = check_network(net, x, rng.integers(0, 15, 4), rng)
    assert max(errors.values()) < TOL, max(errors.items(), key=lambda kv: kv[1])


def test_nonfinite_loss_is_numeric_error(rng):
    from ascfusion.errors import NumericError
    net = build_network(SMALL, dtype=F64)
    net.layers[-1].params["W"][...] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="dense"):
        net.loss_and_gradients(rng.normal(size=(2, 75, 128)), [0, 1])


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_network(SMALL, seed=5)
    net.save(tmp_path / "n.npz", scaler_hash="abc")
    back = Network.load(tmp_path / "n.npz")
    x = rng.normal(size=(3, 75, 128))
    np.testing.assert_array_equal(net.forward(x), back.forward(x))
    assert back.scaler_hash == "abc"


def test_relative_error_floor():
    assert relative_error([1e-12], [-1e-12]) < 1e-6
    assert relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


# --- Adam -----------------------------------------------------------------


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1e-1))
def test_adam_first_step_magnitude(g, lr):
    p = {"w": np.zeros(1)}
    Adam().step(p, {"w": np.array([g])}, lr)
    delta = p["w"][0]
    assert abs(delta) <= lr * (1 + 1e-6)
    assert np.sign(delta) == -np.sign(g)
    assert delta == pytest.approx(-lr * g / (abs(g) + 1e-8), rel=1e-9)


def test_adam_zero_gradient_no_motion():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam()
    for _ in range(5):
        opt.step(p, {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_odd_in_gradient(rng):
    g = rng.normal(size=4)
    p = {"a": np.zeros(4), "b": np.zeros(4)}
    opt = Adam()
    for _ in range(3):
        opt.step(p, {"a": g, "b": -g}, 0.01)
    np.testing.assert_array_equal(p["a"], -p["b"])


def test_adam_matches_reference_recursion(rng):
    # two steps written out by hand
    g1, g2 = rng.normal(size=3), rng.normal(size=3)
    p = {"w": np.ones(3)}
    opt = Adam()
    opt.step(p, {"w": g1}, 0.01)
    opt.step(p, {"w": g2}, 0.01)
    w = np.ones(3)
    m = v = np.zeros(3)
    for t, g in enumerate((g1, g2), start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


# --- training loop -----------------------------------------------------------


def test_validation_split_holds_out_whole_groups():
    labels = np.repeat(np.arange(3), 70)
    groups = np.repeat(np.arange(30), 7)
    tr, va = validation_split(labels, 0.15, 0, groups, 3)
    assert set(groups[tr]).isdisjoint(groups[va])
    # round(0.15 * 10) = 2 groups per class
    assert len(va) == 3 * 2 * 7
    assert np.array_equal(np.sort(np.concatenate([tr, va])), np.arange(210))


def test_validation_split_small_classes():
    labels = np.repeat(np.arange(2), 3)
    tr, va = validation_split(labels, 0.15, 0, np.arange(6), 2)
    assert len(va) == 2  # one per class even though round(0.45) = 0
    tr, va = validation_split(np.array([0, 1]), 0.15, 0, None, 2)
    assert len(va) == 0  # a single group always stays in training


def test_missing_class_rejected(rng):
    net = build_network(SMALL)
    with pytest.raises(DataError, match="missing"):
        train(net, rng.normal(size=(6, 75, 128)), [0, 1, 0, 1, 0, 1])


def test_invalid_training_config():
    with pytest.raises(ConfigError):
        TrainingConfig(initial_lr=-1).validate()


def test_schedule_plateau_and_early_stop(monkeypatch, tmp_path, rng):
    """Val loss improves once, then never: halve after 5, stop after 15."""
    losses = iter([1.0] + [2.0] * 100)
    monkeypatch.setattr(train_mod, "evaluate", lambda net, x, y: (next(losses), 0.5))
    net = build_network(SMALL, seed=0)
    x = rng.normal(size=(12, 75, 128)).astype(np.float32)
    y = np.arange(12) % 3
    states = []
    real_step = Adam.step

    def spy(self, params, grads, lr):
        real_step(self, params, grads, lr)
        if self.t == 1:
            states.append(net.state_dict())

    monkeypatch.setattr(Adam, "step", spy)
    cfg = TrainingConfig(max_epochs=200, batch_size=64, val_fraction=0.34)
    net, hist = train(net, x, y, cfg, history_path=tmp_path / "h.jsonl")
    assert isinstance(hist, TrainingHistory)
    assert len(hist.epochs) == 16 and hist.stopped_early and hist.best_epoch == 0
    assert hist.lrs[:6] == [0.002] * 6
    assert hist.lrs[6:11] == [0.001] * 5
    assert hist.lrs[11:16] == [0.0005] * 5
    for k, v in net.state_dict().items():  # best (epoch 0) weights restored
        np.testing.assert_array_equal(v, states[0][k])
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == 16 and json.loads(lines[6])["lr"] == 0.001


@pytest.mark.slow
def test_overfits_separable_patches():
    """15 classes x 20 patches whose class shows as a bright mel band."""
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(15), 20)
    x = rng.normal(scale=0.5, size=(300, 75, 128)).astype(np.float32)
    for k in range(15):
        x[y == k, :, 8 * k:8 * k + 6] += 2.0
    net = build_network(NetworkConfig("CNN_4"), seed=0)
    net, hist = train(net, x, y, TrainingConfig(max_epochs=3, val_fraction=0.15))
    assert max(e.train_accuracy for e in hist.epochs) >= 0.95
