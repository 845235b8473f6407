import numpy as np
import pytest

from safempc.neural import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    Adam,
    DenseNet,
    LipschitzCbf,
    Normalizer,
    Pnn,
    SafetyClassifier,
    bce_loss_from_prob,
    gaussian_nll,
    load_checkpoint,
    power_iteration,
    save_checkpoint,
    soft_clamp_log_var,
)
from safempc.streams import RandomStream
from safempc.testkit import exact_spectral_norm, finite_diff_grad, relative_error


def test_dense_forward_shapes():
    net = DenseNet([3, 8, 2], stream=RandomStream(0))
    out = net.forward(np.zeros((5, 3)))
    assert out.shape == (5, 2)


def test_dense_backward_matches_finite_differences():
    net = DenseNet([3, 6, 2], hidden_activation="swish", stream=RandomStream(1))
    X = RandomStream(2).normal(size=(4, 3))
    T = RandomStream(3).normal(size=(4, 2))

    def loss_at(flat):
        net.set_flat(flat)
        out = net.forward(X)
        return 0.5 * float(np.sum((out - T) ** 2))

    x0 = net.get_flat().copy()
    out, cache = net.forward_cached(X)
    grads, _ = net.backward(cache, out - T)
    analytic = net.flat_grad(grads)
    numeric = finite_diff_grad(loss_at, x0)
    assert relative_error(analytic, numeric) < 1e-6


def test_dense_input_gradient():
    net = DenseNet([2, 5, 1], hidden_activation="tanh", output_activation="tanh", stream=RandomStream(4))
    x = np.array([[0.3, -0.2]])
    _, cache = net.forward_cached(x)
    _, d_in = net.backward(cache, np.ones((1, 1)))

    def f(xv):
        return float(net.forward(xv[None, :])[0, 0])

    numeric = finite_diff_grad(f, x[0])
    assert relative_error(d_in[0], numeric) < 1e-6


def test_gaussian_nll_value_and_grads():
    mean = np.array([[0.5, -1.0]])
    log_var = np.array([[0.0, 0.2]])
    target = np.array([[0.0, 0.0]])
    loss, d_mean, d_lv = gaussian_nll(mean, log_var, target)
    expected = 0.5 * (
        0.25 + 0.0 + np.log(2 * np.pi) + 1.0 * np.exp(-0.2) + 0.2 + np.log(2 * np.pi)
    )
    assert loss == pytest.approx(expected)

    flat0 = np.concatenate([mean.ravel(), log_var.ravel()])

    def f(flat):
        m = flat[:2][None, :]
        lv = flat[2:][None, :]
        return gaussian_nll(m, lv, target)[0]

    numeric = finite_diff_grad(f, flat0)
    analytic = np.concatenate([d_mean.ravel(), d_lv.ravel()])
    assert relative_error(analytic, numeric) < 1e-6


def test_soft_clamp_range_and_identity_region():
    raw = np.linspace(-100, 100, 201)
    clamped = soft_clamp_log_var(raw)
    assert np.all(clamped >= LOG_VAR_MIN)
    # the smooth clamp may exceed the ceiling by softplus(lo - hi)
    assert np.all(clamped <= LOG_VAR_MAX + 1e-4)
    # far inside the interval the clamp is nearly the identity
    assert soft_clamp_log_var(np.array([-5.0]))[0] == pytest.approx(-5.0, abs=1e-2)


def test_pnn_nll_gradient_check():
    pnn = Pnn(3, 2, hidden=(6,), stream=RandomStream(5))
    X = RandomStream(6).normal(size=(4, 3))
    Y = RandomStream(7).normal(size=(4, 2))
    _, grads = pnn.nll_loss(X, Y)

    def f(flat):
        pnn.net.set_flat(flat)
        mean, log_var = pnn.forward(X)
        return gaussian_nll(mean, log_var, Y)[0]

    numeric = finite_diff_grad(f, pnn.net.get_flat().copy())
    assert relative_error(pnn.net.flat_grad(grads), numeric) < 1e-5


def test_bce_gradient_check():
    clf = SafetyClassifier(3, hidden=(5,), stream=RandomStream(8))
    X = RandomStream(9).normal(size=(6, 3))
    y = (RandomStream(10).uniform(size=6) > 0.5).astype(float)
    _, grads = clf.bce(X, y)

    def f(flat):
        clf.net.set_flat(flat)
        return bce_loss_from_prob(clf.prob(X), y)[0]

    numeric = finite_diff_grad(f, clf.net.get_flat().copy())
    assert relative_error(clf.net.flat_grad(grads), numeric) < 1e-6


def test_power_iteration_matches_exact():
    for i in range(5):
        W = RandomStream(20 + i).normal(size=(5, 4))
        u = RandomStream(30 + i).normal(size=5)
        u /= np.linalg.norm(u)
        sigma, _ = power_iteration(W, u, 100)
        assert sigma == pytest.approx(exact_spectral_norm(W), abs=1e-8)


def test_lipschitz_renormalize_certifies_budget():
    cbf = LipschitzCbf(4, hidden=(8, 8), lipschitz_bound=1.0, stream=RandomStream(40))
    # blow a layer up, then re-project
    cbf.net.weights[0] *= 10.0
    certs = cbf.renormalize()
    for W, c in zip(cbf.net.weights, certs):
        assert c <= cbf.layer_budget + 1e-12
        assert exact_spectral_norm(W) <= cbf.layer_budget + 1e-9
    assert float(np.prod(certs)) <= 1.0 + 1e-12


def test_lipschitz_sampled_slope_within_bound():
    cbf = LipschitzCbf(3, hidden=(8, 8), lipschitz_bound=1.0, stream=RandomStream(41))
    X = RandomStream(42).normal(size=(500, 3))
    Y = X + 0.01 * RandomStream(43).normal(size=(500, 3))
    num = np.abs(cbf.value(X) - cbf.value(Y))
    den = np.linalg.norm(X - Y, axis=1)
    assert np.max(num / den) <= 1.0 + 1e-9


def test_cbf_output_in_open_interval():
    cbf = LipschitzCbf(3, hidden=(6,), stream=RandomStream(44))
    v = cbf.value(RandomStream(45).normal(size=(100, 3)) * 10)
    assert np.all(np.abs(v) < 1.0)


def test_adam_reduces_quadratic():
    params = {"x": np.array([5.0, -3.0])}
    opt = Adam(lr=0.1)
    for _ in range(200):
        opt.step(params, {"x": 2.0 * params["x"]})
    assert np.all(np.abs(params["x"]) < 1e-2)


def test_normalizer_roundtrip_and_floor():
    X = np.stack([np.linspace(0, 10, 50), np.full(50, 2.0)], axis=1)
    norm = Normalizer(2)
    norm.fit(X)
    assert norm.std[1] == pytest.approx(1e-6)
    Z = norm.transform(X)
    assert np.allclose(norm.inverse(Z), X)


def test_checkpoint_roundtrip(tmp_path):
    arrays = {
        "W0": RandomStream(50).normal(size=(3, 4)),
        "b0": RandomStream(51).normal(size=4),
    }
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, "test_kind", {"note": 1}, arrays)
    kind, meta, loaded = load_checkpoint(path)
    assert kind == "test_kind"
    assert meta == {"note": 1}
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_pnn_raises_on_nonfinite_input():
    pnn = Pnn(2, 1, hidden=(4,), stream=RandomStream(60))
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        pnn.forward(np.array([[np.nan, 0.0]]))
