import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import finite_difference
from safeflex.nn import Adam, Mlp, adam_step, clip_grad_norm, soft_update


def make_net(sizes=(4, 6, 5, 2), hidden="tanh", out=("sigmoid", "tanh"), seed=0, **kw):
    return Mlp(list(sizes), hidden, list(out) if not isinstance(out, str) else out, np.random.default_rng(seed), **kw)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def check_gradients(net, x, upstream, pre_weight=None):
    """Analytic gradients against central differences of <upstream, y> (+ optional pre-activation term)."""

    def loss():
        y = net.forward(x)
        val = float(np.sum(upstream * y))
        if pre_weight is not None:
            val += 0.5 * pre_weight * float(np.sum(net.last_pre_activation**2))
        return val

    net.forward(x)
    g_pre = pre_weight * net.last_pre_activation if pre_weight is not None else None
    grads, g_in = net.backward(x, upstream, g_pre)
    for p, g in zip(net.parameters(), grads):
        fd = finite_difference(loss, p)
        assert rel_err(g, fd) <= 1e-4
    fd_x = finite_difference(loss, x)
    assert rel_err(g_in, fd_x) <= 1e-4


@pytest.mark.parametrize("hidden", ["relu", "tanh", "sigmoid"])
def test_gradients_match_finite_differences(hidden):
    rng = np.random.default_rng(3)
    net = make_net(hidden=hidden, seed=1)
    x = rng.normal(size=(7, 4))
    upstream = rng.normal(size=(7, 2))
    check_gradients(net, x, upstream)


def test_critic_shaped_gradients():
    rng = np.random.default_rng(5)
    net = make_net((9, 8, 8, 1), hidden="relu", out="identity", seed=2)
    check_gradients(net, rng.normal(size=(5, 9)), rng.normal(size=(5, 1)))


def test_pre_activation_gradient_term():
    rng = np.random.default_rng(6)
    net = make_net(seed=3)
    check_gradients(net, rng.normal(size=(4, 4)), rng.normal(size=(4, 2)), pre_weight=0.3)


def test_single_sample_gradients():
    rng = np.random.default_rng(7)
    net = make_net(seed=4)
    check_gradients(net, rng.normal(size=4), rng.normal(size=2))


def test_zero_final_layer_gives_zero_output():
    net = make_net(out="identity", out_init_scale=0.0)
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(net.forward(x), 0.0)


def test_identity_layer_passes_input_through():
    net = Mlp([3, 3], "relu", "identity")
    net.weights[0][:] = np.eye(3)
    net.biases[0][:] = 0.0
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(net.forward(x), x)


def test_forward_is_deterministic():
    x = np.ones(4)
    a = make_net(seed=9).forward(x)
    b = make_net(seed=9)
    np.testing.assert_array_equal(a, b.forward(x))
    np.testing.assert_array_equal(b.forward(x), b.forward(x))


def test_zero_upstream_gives_zero_parameter_gradients():
    net = make_net()
    x = np.ones((2, 4))
    net.forward(x)
    grads, g_in = net.backward(x, np.zeros((2, 2)))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(g_in == 0)


def test_linear_input_gradient():
    net = Mlp([3, 2], "relu", "identity", np.random.default_rng(1))
    x = np.ones(3)
    net.forward(x)
    up = np.array([0.3, -2.0])
    _, g_in = net.backward(x, up)
    np.testing.assert_allclose(g_in, net.weights[0] @ up)


def test_backward_rejects_stale_cache():
    net = make_net()
    with pytest.raises(RuntimeError):
        net.backward(np.ones(4), np.ones(2))
    net.forward(np.ones(4))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros(4), np.ones(2))


def test_bad_construction():
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 2], "swish")
    with pytest.raises(ValueError):
        Mlp([3, 2], "relu", ["tanh"])
    with pytest.raises(ValueError):
        make_net().forward(np.ones(5))


def test_weights_roundtrip(tmp_path):
    net = make_net()
    net.save(tmp_path / "w.json")
    back = Mlp.load(tmp_path / "w.json")
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(net.forward(x), back.forward(x))
    with pytest.raises(ValueError):
        Mlp.from_dict({**net.to_dict(), "version": 99})


def test_adam_zero_gradient_keeps_parameters():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    adam_step(opt, [np.zeros(2)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_moves_against_constant_gradient():
    p = np.zeros(3)
    opt = Adam([p], lr=0.01)
    g = np.array([1.0, -1.0, 5.0])
    for _ in range(50):
        opt.step([g])
    assert np.all(np.sign(p) == -np.sign(g))


@settings(max_examples=100, deadline=None)
@given(scale=st.floats(1e-6, 1e6), lr=st.floats(1e-5, 1.0), seed=st.integers(0, 1000))
def test_adam_first_step_is_bounded_by_lr(scale, lr, seed):
    g = scale * np.random.default_rng(seed).normal(size=5)
    p = np.zeros(5)
    Adam([p], lr=lr).step([g])
    assert np.max(np.abs(p)) <= lr * (1 + 1e-8)


def test_adam_state_roundtrip():
    p = np.ones(2)
    opt = Adam([p], lr=0.1)
    opt.step([np.array([1.0, 2.0])])
    doc = opt.state_dict()
    q = np.ones(2)
    other = Adam([q], lr=0.5)
    other.load_state_dict(doc)
    assert other.t == 1 and other.lr == 0.1
    np.testing.assert_array_equal(other.m[0], opt.m[0])


def test_soft_update_examples():
    target, online = [np.zeros(2)], [np.ones(2)]
    soft_update(target, online, 0.05)
    np.testing.assert_allclose(target[0], 0.05)
    soft_update(target, online, 1.0)
    np.testing.assert_array_equal(target[0], 1.0)
    with pytest.raises(ValueError):
        soft_update(target, online, 0.0)


def test_soft_update_converges_geometrically():
    target, online = [np.zeros(1)], [np.ones(1)]
    gaps = []
    for _ in range(20):
        soft_update(target, online, 0.1)
        gaps.append(1.0 - target[0][0])
    np.testing.assert_allclose(gaps, 0.9 ** np.arange(1, 21))


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    clipped = clip_grad_norm(g, 1.0)
    assert np.sqrt(sum(float(x @ x) for x in clipped)) == pytest.approx(1.0)
    assert clip_grad_norm(g, 10.0)[0] is g[0]
