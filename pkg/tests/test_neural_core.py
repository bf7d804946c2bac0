import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogemm.device import ContinuousLevels
from ogemm.emulator import EmulatorConfig, ExactBackend, OpticalBackend
from ogemm.errors import DomainError, StateError, TrainingError
from ogemm.nn import (AdamState, DenseNet, accuracy, adam_step, backward, confusion_matrix, forward, predict,
                      train_classifier)

IDEAL = OpticalBackend(ContinuousLevels(0.1, 0.7), EmulatorConfig(noise_enabled=False))


def loss_and_grad(net, X, G):
    """Scalar loss sum(out * G) so that dL/d(out) = G."""
    acts = forward(net, X)
    return float(np.sum(acts.output * G)), acts


def finite_difference(net, X, G, h=1e-4):
    grads = []
    for p in net.params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            net.touch()
            up = loss_and_grad(net, X, G)[0]
            p[i] = old - h
            net.touch()
            down = loss_and_grad(net, X, G)[0]
            p[i] = old
            net.touch()
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


# --- forward -------------------------------------------------------------------------------------


def test_identity_linear_layer(rng):
    net = DenseNet([5, 5], ["linear"])
    net.weights[0] = np.eye(5)
    X = rng.normal(size=(3, 5))
    assert np.array_equal(net(X), X)


def test_tanh_at_zero():
    net = DenseNet([3, 4], ["tanh"])
    net.biases[0][:] = 0
    assert np.array_equal(net(np.zeros((2, 3))), np.zeros((2, 4)))


@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    net = DenseNet([6, 7, 4], ["relu", "softmax"], seed=seed)
    X = np.random.default_rng(seed).normal(0, 3, (5, 6))
    assert np.allclose(net(X).sum(axis=1), 1.0, atol=1e-6)


def test_forward_shape_error():
    with pytest.raises(DomainError):
        DenseNet([3, 2], ["tanh"])(np.ones((4, 5)))


def test_emulator_forward_matches_exact(rng):
    net = DenseNet([6, 9, 4], ["tanh", "softmax"], seed=3)
    X = rng.uniform(-1, 1, (10, 6))
    ex = net(X)
    net.backend = IDEAL
    assert np.max(np.abs(net(X) - ex)) < 1e-6


# --- backward ------------------------------------------------------------------------------------


@pytest.mark.parametrize("acts", [["tanh", "linear"], ["relu", "linear"], ["linear", "linear"],
                                  ["tanh", "softmax"], ["relu", "tanh"]])
def test_gradients_match_finite_differences(acts, rng):
    net = DenseNet([4, 8, 3], acts, seed=1)
    for b in net.biases:
        b[:] = rng.normal(0, 0.1, b.shape)  # keep relu units away from their kink
    X = rng.uniform(-1, 1, (5, 4))
    G = rng.normal(size=(5, 3))
    _, a = loss_and_grad(net, X, G)
    analytic = backward(net, a, G)
    numeric = finite_difference(net, X, G)
    for ga, gn in zip(analytic, numeric):
        assert rel_err(ga, gn) < 1e-3


def test_zero_grad_out(rng):
    net = DenseNet([4, 8, 3], ["tanh", "linear"])
    a = forward(net, rng.normal(size=(2, 4)))
    assert all(np.all(g == 0) for g in backward(net, a, np.zeros((2, 3))))


def test_emulator_gradients_match_exact(rng):
    net = DenseNet([4, 8, 3], ["tanh", "softmax"], seed=2)
    X, G = rng.uniform(-1, 1, (6, 4)), rng.normal(size=(6, 3))
    g_ex = backward(net, forward(net, X), G)
    emu = net.copy(IDEAL)
    g_em = backward(emu, forward(emu, X), G)
    for a, b in zip(g_ex, g_em):
        assert np.max(np.abs(a - b)) < 1e-5


def test_stale_cache(rng):
    net = DenseNet([2, 2], ["linear"])
    a = forward(net, rng.normal(size=(1, 2)))
    adam_step(net, [np.ones((2, 2)), np.ones(2)], AdamState.for_net(net))
    with pytest.raises(StateError):
        backward(net, a, np.ones((1, 2)))


# --- Adam ----------------------------------------------------------------------------------------


def test_adam_first_step_is_lr():
    net = DenseNet([1, 1], ["linear"])
    w0, b0 = net.weights[0].copy(), net.biases[0].copy()
    st_ = AdamState.for_net(net, lr=0.01)
    adam_step(net, [np.ones((1, 1)), np.ones(1)], st_)
    assert net.weights[0][0, 0] - w0[0, 0] == pytest.approx(-0.01, rel=1e-6)
    assert net.biases[0][0] - b0[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_zero_gradient_is_no_op():
    net = DenseNet([3, 2], ["linear"])
    before = [p.copy() for p in net.params]
    adam_step(net, [np.zeros_like(p) for p in net.params], AdamState.for_net(net))
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))


def test_adam_quadratic_bowl():
    net = DenseNet([1, 1], ["linear"])
    net.weights[0][:] = 1.0
    st_ = AdamState.for_net(net, lr=0.01)
    for _ in range(500):
        w = net.weights[0][0, 0]
        adam_step(net, [np.array([[2 * w]]), np.zeros(1)], st_)
    assert abs(net.weights[0][0, 0]) < 1e-3


def test_adam_non_finite():
    net = DenseNet([2, 1], ["linear"])
    with pytest.raises(TrainingError, match="layer 0"):
        adam_step(net, [np.array([[np.nan, 0.0]]), np.zeros(1)], AdamState.for_net(net))


# --- training ------------------------------------------------------------------------------------

XOR_X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_Y = np.array([0, 1, 1, 0])


def test_xor_exact():
    net = DenseNet([2, 8, 2], ["tanh", "softmax"], seed=0)
    net, hist = train_classifier(net, XOR_X, XOR_Y, 2000, "exact", lr=0.01)
    assert accuracy(net, XOR_X, XOR_Y) == 1.0
    assert hist[-1]["train_acc"] == 1.0


def test_empty_dataset():
    with pytest.raises(DomainError):
        train_classifier(DenseNet([2, 2], ["softmax"]), np.zeros((0, 2)), np.zeros(0, dtype=int), 1)


def test_optical_modes_need_backend():
    with pytest.raises(DomainError):
        train_classifier(DenseNet([2, 2], ["softmax"]), XOR_X, XOR_Y, 1, "physics-aware")


def _blobs(seed=0, n=300):
    r = np.random.default_rng(seed)
    y = r.integers(0, 3, n)
    X = np.clip(0.5 + 0.15 * np.eye(3)[y] @ r.normal(size=(3, 5)) + 0.08 * r.normal(size=(n, 5)), 0, 1)
    return X, y


def test_hybrid_without_finetune_is_exact_training(ref_tt):
    X, y = _blobs()
    emu = OpticalBackend(ref_tt, EmulatorConfig(rng_seed=1))
    a, _ = train_classifier(DenseNet([5, 16, 3], ["relu", "softmax"], seed=4), X, y, 3, "exact", seed=2)
    b, _ = train_classifier(DenseNet([5, 16, 3], ["relu", "softmax"], seed=4), X, y, 3, "hybrid",
                            optical_backend=emu, finetune_epochs=0, seed=2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    # and inference on the emulator is then the exact-train + emulator-inference regime
    a.backend = OpticalBackend(ref_tt, EmulatorConfig(rng_seed=1))
    b.backend = OpticalBackend(ref_tt, EmulatorConfig(rng_seed=1))
    assert np.array_equal(a(X), b(X))


def test_backend_swap_identity():
    X, y = _blobs(1)
    net, _ = train_classifier(DenseNet([5, 16, 3], ["relu", "softmax"], seed=0), X, y, 2)
    ref = net.copy(ExactBackend())(X)
    for _ in range(4):
        assert np.max(np.abs(net.copy(IDEAL)(X) - ref)) < 1e-9


def test_exact_training_deterministic():
    X, y = _blobs(2)
    a, _ = train_classifier(DenseNet([5, 8, 3], ["tanh", "softmax"], seed=5), X, y, 2, seed=9)
    b, _ = train_classifier(DenseNet([5, 8, 3], ["tanh", "softmax"], seed=5), X, y, 2, seed=9)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_physics_aware_training_runs(ref_tt):
    X, y = _blobs(3)
    emu = OpticalBackend(ref_tt, EmulatorConfig(rng_seed=2))
    net, hist = train_classifier(DenseNet([5, 16, 3], ["relu", "softmax"], seed=1), X, y, 5, "physics-aware",
                                 optical_backend=emu, lr=0.01)
    assert hist[-1]["train_acc"] > 0.8
    assert all(np.all(np.isfinite(p)) for p in net.params)


def test_checkpoint_round_trip(tmp_path, rng):
    net = DenseNet([3, 4, 2], ["tanh", "softmax"], seed=6)
    loaded = DenseNet.load(net.save(tmp_path / "m.pkl"))
    X = rng.normal(size=(4, 3))
    assert np.array_equal(loaded(X), net(X))


def test_confusion_and_predict():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    net = DenseNet([2, 2], ["softmax"])
    net.weights[0] = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert predict(net, np.array([[2.0, 0.0], [0.0, 2.0]])).tolist() == [0, 1]
