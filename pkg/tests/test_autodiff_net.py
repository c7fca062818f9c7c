import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contraction_ac.autodiff_net import (
    AdamState,
    DiagGaussian,
    Mlp,
    adam_step,
    clip_grad_norm,
    entropy,
    gaussian_sample,
    load_checkpoint,
    log_prob,
    save_checkpoint,
)
from contraction_ac.numerics import fd_jacobian


def _random_net(sizes, seed):
    rng = np.random.default_rng(seed)
    net = Mlp(sizes, rng)
    net.params[:] = rng.standard_normal(net.n_params) * 0.7
    return net


def _param_fd(net, x, upstream, h=1e-6):
    base = net.params.copy()
    grad = np.zeros_like(base)
    for i in range(base.size):
        net.params[i] = base[i] + h
        fp = np.sum(upstream * net(x))
        net.params[i] = base[i] - h
        fm = np.sum(upstream * net(x))
        net.params[i] = base[i]
        grad[i] = (fp - fm) / (2 * h)
    return grad


def test_zero_net_outputs_zero():
    net = Mlp([3, 5, 2])
    np.testing.assert_array_equal(net(np.array([1.0, -2.0, 0.5])), np.zeros(2))


def test_linear_net_is_matrix_product():
    net = Mlp([3, 2])
    w = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
    net.weights[0][...] = w
    x = np.array([0.2, -1.0, 2.0])
    np.testing.assert_allclose(net(x), x @ w)
    np.testing.assert_allclose(net.input_jacobian(x), w.T)


def test_hand_evaluated_221_net():
    net = Mlp([2, 2, 1])
    net.weights[0][...] = [[0.5, -1.0], [2.0, 0.3]]
    net.biases[0][...] = [0.1, -0.2]
    net.weights[1][...] = [[1.5], [-0.7]]
    net.biases[1][...] = [0.05]
    x = np.array([0.4, -0.3])
    h1 = math.tanh(0.5 * 0.4 + 2.0 * -0.3 + 0.1)
    h2 = math.tanh(-1.0 * 0.4 + 0.3 * -0.3 - 0.2)
    assert net(x)[0] == pytest.approx(1.5 * h1 - 0.7 * h2 + 0.05, abs=1e-15)


def test_dimension_mismatch():
    net = Mlp([3, 2])
    with pytest.raises(ValueError):
        net(np.zeros(4))
    with pytest.raises(ValueError):
        net.backward(np.zeros(3), np.zeros(5))


def test_backward_zero_upstream():
    net = _random_net([3, 4, 2], 0)
    np.testing.assert_array_equal(net.backward(np.ones(3), np.zeros(2)), 0.0)


def test_backward_linear_scalar():
    net = Mlp([3, 1])
    x = np.array([1.0, -2.0, 0.5])
    g = net.backward(x, np.array([1.0]))
    np.testing.assert_allclose(g[:3], x)
    np.testing.assert_allclose(g[3:], [1.0])


def test_backward_matches_fd_342():
    net = _random_net([3, 4, 2], 1)
    x = np.array([0.3, -0.8, 1.1])
    up = np.array([0.7, -1.3])
    exact = net.backward(x, up)
    fd = _param_fd(net, x, up)
    assert np.linalg.norm(exact - fd) <= 1e-4 * np.linalg.norm(fd)


def test_backward_random_nets():
    rng = np.random.default_rng(7)
    for k in range(50):
        sizes = [int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4))]
        net = _random_net(sizes, 100 + k)
        x = rng.standard_normal((3, sizes[0]))
        up = rng.standard_normal((3, sizes[-1]))
        exact = net.backward(x, up)
        fd = _param_fd(net, x, up)
        assert np.linalg.norm(exact - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_backward_input_gradient():
    net = _random_net([4, 6, 3], 2)
    x = np.random.default_rng(3).standard_normal(4)
    up = np.array([1.0, -0.5, 2.0])
    _, gx = net.backward(x, up, return_input_grad=True)
    np.testing.assert_allclose(gx, up @ net.input_jacobian(x), atol=1e-12)


def test_input_jacobian_at_origin_is_weight_product():
    net = Mlp([3, 4, 2], np.random.default_rng(4))
    jac = net.input_jacobian(np.zeros(3))
    np.testing.assert_allclose(jac, (net.weights[0] @ net.weights[1]).T, atol=1e-14)


def test_input_jacobian_vs_fd_random_nets():
    rng = np.random.default_rng(5)
    for k in range(50):
        net = _random_net([4, 8, 3], 200 + k)
        x = rng.standard_normal(4)
        assert np.max(np.abs(net.input_jacobian(x) - fd_jacobian(net, x))) <= 1e-5


def test_forward_backward_deterministic():
    net = _random_net([3, 5, 2], 9)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(net(x), net(x))
    up = np.ones((4, 2))
    np.testing.assert_array_equal(net.backward(x, up), net.backward(x, up))


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    st_ = AdamState(2, 1e-3)
    adam_step(st_, p, np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert st_.step_count == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = np.zeros(3)
    adam_step(AdamState(3, 1e-3), p, g)
    np.testing.assert_allclose(p, -1e-3 * g / (np.abs(g) + 1e-8), atol=1e-12)


def test_adam_moves_against_constant_gradient():
    p = np.array([0.0, 0.0])
    st_ = AdamState(2, 1e-2)
    for _ in range(50):
        adam_step(st_, p, np.array([1.0, -3.0]))
    assert p[0] < 0 < p[1]


def test_adam_skips_nonfinite():
    p = np.array([1.0])
    st_ = AdamState(1, 1e-3)
    assert adam_step(st_, p, np.array([np.nan])) is False
    assert st_.skipped == 1 and st_.step_count == 0
    np.testing.assert_array_equal(p, [1.0])


def test_clip_grad_norm():
    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(np.linalg.norm(clip_grad_norm(g, 0.5)), 0.5)
    np.testing.assert_array_equal(clip_grad_norm(g, None), g)
    np.testing.assert_array_equal(clip_grad_norm(g, 10.0), g)


def test_gaussian_closed_forms():
    d = DiagGaussian(np.zeros(1), np.zeros(1))
    assert entropy(d) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-12)
    assert entropy(d) == pytest.approx(1.41894, abs=1e-5)
    assert log_prob(d, np.zeros(1)) == pytest.approx(-0.91894, abs=1e-5)
    assert entropy(DiagGaussian(np.zeros(1), np.array([0.5]))) > entropy(d)


def test_gaussian_std_clamped():
    d = DiagGaussian(np.zeros(2), np.array([-20.0, 20.0]))
    np.testing.assert_allclose(d.std, [1e-3, 10.0])


def test_gaussian_entropy_is_expected_negative_log_prob():
    rng = np.random.default_rng(11)
    d = DiagGaussian(np.array([0.5, -1.0, 2.0]), np.array([-0.3, 0.2, 0.9]))
    lp = log_prob(d, np.array([gaussian_sample(d, rng) for _ in range(10_000)]))
    se = lp.std() / math.sqrt(lp.size)
    assert abs(-lp.mean() - float(entropy(d))) <= 3 * se


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 2), st.floats(-5, 5))
def test_gaussian_log_prob_finite(log_std, a):
    d = DiagGaussian(np.zeros(1), np.array([log_std]))
    assert np.isfinite(log_prob(d, np.array([a])))


def test_checkpoint_roundtrip(tmp_path):
    net = _random_net([3, 4, 2], 12)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, "actor", seed=5, step=17, extras={"log_std": np.array([0.1, -0.2])}, meta={"k": 1})
    loaded, header, extras = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.params, net.params)
    assert header["widths"] == [3, 4, 2] and header["role"] == "actor"
    assert header["seed"] == 5 and header["step"] == 17 and header["meta"] == {"k": 1}
    np.testing.assert_array_equal(extras["log_std"], [0.1, -0.2])
    # payload is little-endian float64 after a single header line
    raw = path.read_bytes()
    body = raw[raw.index(b"\n") + 1 :]
    np.testing.assert_array_equal(np.frombuffer(body, "<f8")[: net.n_params], net.params)


def test_checkpoint_size_mismatch(tmp_path):
    net = _random_net([2, 3, 1], 0)
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, net, "critic", 0, 0)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
