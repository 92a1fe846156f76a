import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flockrl.errors import CorruptCheckpointError, DimensionError, InvalidConfigurationError, NumericError
from flockrl.nn import (AdamState, Gradient, Network, adam_step, l2_norm_grad, l2_param_norm, load_params,
                        mlp_backward, mlp_forward, mlp_init, save_params, soft_update)

from oracles import central_differences, gradient_mismatch, reference_adam

ACTOR = [15, 64, 64, 64, 2]
CRITIC = [51, 64, 64, 64, 1]


def test_init_is_deterministic():
    a = mlp_init(ACTOR, 7)
    b = mlp_init(ACTOR, 7)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert mlp_init(ACTOR, 8).flat.tobytes() != a.flat.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_init_bounds_and_zero_biases(seed):
    net = mlp_init([2, 2], seed)
    assert np.all(np.abs(net.weights[0]) <= 1 / math.sqrt(2))
    assert np.all(net.biases[0] == 0)


def test_actor_parameter_count():
    assert mlp_init(ACTOR, 0).size == 15 * 64 + 64 + 64 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2 == 9474


def test_layout_shapes():
    net = mlp_init([3, 5, 2], 1)
    assert [w.shape for w in net.weights] == [(5, 3), (2, 5)]
    assert [b.shape for b in net.biases] == [(5,), (2,)]
    # views share the flat buffer
    net.weights[1][0, 0] = 42.0
    assert 42.0 in net.flat


@pytest.mark.parametrize("sizes", [[], [3], [3, 0, 2]])
def test_invalid_layer_sizes(sizes):
    with pytest.raises(InvalidConfigurationError):
        mlp_init(sizes, 0)


def test_forward_examples():
    zero = Network([4, 3, 2])
    assert np.all(mlp_forward(zero, np.arange(4.0)) == 0)
    one = Network([1, 1], "tanh")
    one.weights[0][0, 0] = 1.0
    assert mlp_forward(one, [0.0])[0] == 0.0
    chain = Network([1, 1, 1], "identity")
    chain.flat[:2] = 1.0
    assert mlp_forward(chain, [1.0])[0] == pytest.approx(0.761594, abs=1e-6)
    assert mlp_forward(chain, [1.0])[0] == math.tanh(1.0)


def test_forward_dimension_error():
    with pytest.raises(DimensionError):
        mlp_forward(mlp_init([3, 2], 0), np.zeros(4))


def test_forward_batch_matches_rows():
    net = mlp_init([3, 8, 2], 3, "tanh")
    x = np.random.default_rng(0).normal(size=(5, 3))
    batch = mlp_forward(net, x)
    for k in range(5):
        np.testing.assert_allclose(batch[k], mlp_forward(net, x[k]), rtol=0, atol=1e-14)


def test_backward_zero_upstream():
    net = mlp_init([3, 5, 2], 0)
    g, gx = mlp_backward(net, np.ones(3), np.zeros(2))
    assert not g.flat.any() and not gx.any()


def test_backward_linear_example():
    net = Network([1, 1])
    net.weights[0][0, 0] = 2.0
    g, gx = mlp_backward(net, [3.0], [1.0])
    assert g.weights[0][0, 0] == 3.0
    assert g.biases[0][0] == 1.0
    assert gx[0] == 2.0


def test_backward_dimension_error():
    net = mlp_init([3, 2], 0)
    with pytest.raises(DimensionError):
        mlp_backward(net, np.zeros(3), np.zeros(3))


def _check_gradients(sizes, out_activation, seed):
    rng = np.random.default_rng(seed)
    net = mlp_init(sizes, seed, out_activation)
    net.flat += rng.normal(0, 0.1, size=net.size)  # non-zero biases too
    x = rng.normal(size=sizes[0])
    up = rng.normal(size=sizes[-1])
    g, gx = mlp_backward(net, x, up)
    fd = central_differences(lambda: float(up @ mlp_forward(net, x)), net.flat)
    assert len(gradient_mismatch(g.flat, fd)) == 0
    fdx = central_differences(lambda: float(up @ mlp_forward(net, x)), x)
    assert len(gradient_mismatch(gx, fdx)) == 0


@pytest.mark.parametrize("sizes,act", [([3, 5, 2], "identity"), ([3, 5, 2], "tanh"),
                                       (ACTOR, "tanh"), (CRITIC, "identity")])
def test_gradients_match_finite_differences(sizes, act):
    _check_gradients(sizes, act, seed=11)


def test_batched_backward_is_sum_of_rows():
    net = mlp_init([4, 6, 3], 2, "tanh")
    rng = np.random.default_rng(1)
    x, up = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    g, gx = mlp_backward(net, x, up)
    total = sum(mlp_backward(net, x[k], up[k])[0].flat for k in range(3))
    np.testing.assert_allclose(g.flat, total, atol=1e-14)
    for k in range(3):
        np.testing.assert_allclose(gx[k], mlp_backward(net, x[k], up[k])[1], atol=1e-14)


def test_adam_zero_gradient_keeps_params():
    net = mlp_init([3, 4, 2], 0)
    before = net.flat.copy()
    state = AdamState(net)
    adam_step(state, net, Gradient.zeros_like(net))
    np.testing.assert_array_equal(net.flat, before)
    assert state.step == 1


def test_adam_single_step_hand_value():
    net = Network([1, 1])
    net.flat[:] = [0.0, 0.0]
    grad = Gradient([1, 1], np.array([1.0, 0.0]))
    adam_step(AdamState(net), net, grad)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert net.flat[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)
    assert -0.001 < net.flat[0] < -0.000999999


def test_adam_matches_reference_on_quadratic():
    # f(theta) = 0.5 * c * (theta - 3)^2 on the weight, bias held at 0 gradient
    c = 2.5
    net = Network([1, 1])
    net.flat[:] = [0.4, 0.0]
    state = AdamState(net)
    traj = [net.flat[0]]
    for _ in range(100):
        g = Gradient([1, 1], np.array([c * (net.flat[0] - 3.0), 0.0]))
        adam_step(state, net, g)
        traj.append(net.flat[0])
    ref = reference_adam(0.4, lambda th: c * (th - 3.0), 100)
    np.testing.assert_allclose(traj, ref, rtol=0, atol=1e-12)
    assert state.step == 100


def test_adam_rejects_non_finite_gradient():
    net = mlp_init([2, 2], 0)
    before = net.flat.copy()
    state = AdamState(net)
    g = Gradient.zeros_like(net)
    g.flat[0] = np.nan
    with pytest.raises(NumericError):
        adam_step(state, net, g)
    np.testing.assert_array_equal(net.flat, before)
    assert state.step == 0


def test_adam_overflowing_update_leaves_state():
    net = mlp_init([2, 2], 0)
    before = net.flat.copy()
    state = AdamState(net, lr=1e300)
    g = Gradient.zeros_like(net)
    g.flat[:] = 1e200                      # g * g overflows the second moment
    with pytest.raises(NumericError):
        adam_step(state, net, g)
    np.testing.assert_array_equal(net.flat, before)
    assert state.step == 0 and not state.m.any() and not state.v.any()


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    net = mlp_init([3, 4, 2], 0)
    g = Gradient(net.layer_sizes, rng.normal(size=net.size))
    outs = []
    for _ in range(2):
        n2, s2 = net.copy(), AdamState(net)
        adam_step(s2, n2, g)
        adam_step(s2, n2, g)
        outs.append((n2.flat.tobytes(), s2.m.tobytes(), s2.v.tobytes()))
    assert outs[0] == outs[1]


def test_soft_update_endpoints_and_value():
    src = mlp_init([3, 4, 2], 0)
    tgt = mlp_init([3, 4, 2], 1)
    keep = tgt.flat.copy()
    soft_update(tgt, src, 0.0)
    np.testing.assert_array_equal(tgt.flat, keep)
    soft_update(tgt, src, 1.0)
    np.testing.assert_array_equal(tgt.flat, src.flat)
    a, b = Network([1, 1]), Network([1, 1])
    a.flat[:] = 1.0
    soft_update(b, a, 0.0004)
    assert b.flat[0] == 0.0004


def test_soft_update_closed_form():
    tau = 0.0004
    src, tgt = Network([1, 1]), Network([1, 1])
    src.flat[:] = 1.0
    for k in range(1, 2001):
        soft_update(tgt, src, tau)
        if k % 250 == 0:
            assert abs(tgt.flat[0] - (1 - (1 - tau) ** k)) < 1e-12


@pytest.mark.parametrize("tau", [-0.1, 1.5])
def test_soft_update_rejects_tau(tau):
    with pytest.raises(InvalidConfigurationError):
        soft_update(Network([1, 1]), Network([1, 1]), tau)


def test_l2_norm_examples():
    net = Network([1, 1])
    assert l2_param_norm(net) == 0.0
    assert not l2_norm_grad(net).flat.any()
    net.flat[:] = [3.0, 4.0]
    assert l2_param_norm(net) == 5.0
    np.testing.assert_array_equal(l2_norm_grad(net).flat, [0.6, 0.8])


@settings(max_examples=30, deadline=None)
@given(c=st.one_of(st.just(0.0), st.floats(1e-6, 100)), seed=st.integers(0, 2**31))
def test_l2_norm_homogeneous(c, seed):
    net = mlp_init([3, 4, 2], seed)
    scaled = Network(net.layer_sizes, flat=net.flat * c)
    assert l2_param_norm(scaled) == pytest.approx(c * l2_param_norm(net), rel=1e-12)


def test_checkpoint_round_trip(tmp_path):
    net = mlp_init(ACTOR, 3, "tanh")
    state = AdamState(net, lr=3e-4)
    adam_step(state, net, Gradient(net.layer_sizes, np.random.default_rng(0).normal(size=net.size)))
    save_params(tmp_path / "a.bin", net, state)
    net2, state2 = load_params(tmp_path / "a.bin")
    assert net2.flat.tobytes() == net.flat.tobytes()
    assert net2.layer_sizes == net.layer_sizes and net2.out_activation == "tanh"
    assert state2.m.tobytes() == state.m.tobytes() and state2.v.tobytes() == state.v.tobytes()
    assert (state2.step, state2.lr, state2.eps) == (1, 3e-4, 1e-8)
    x = np.random.default_rng(1).normal(size=(100, 15))
    assert mlp_forward(net2, x).tobytes() == mlp_forward(net, x).tobytes()
    save_params(tmp_path / "b.bin", net2, state2)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_without_optimizer(tmp_path):
    net = mlp_init([3, 4, 1], 0)
    save_params(tmp_path / "c.bin", net)
    net2, adam = load_params(tmp_path / "c.bin")
    assert adam is None and net2.flat.tobytes() == net.flat.tobytes()


def test_truncated_checkpoint(tmp_path):
    net = mlp_init([3, 4, 1], 0)
    save_params(tmp_path / "c.bin", net, AdamState(net))
    data = (tmp_path / "c.bin").read_bytes()
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        (tmp_path / "t.bin").write_bytes(data[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_params(tmp_path / "t.bin")


def test_header_body_mismatch(tmp_path):
    net = mlp_init([15, 64, 64, 2], 0)
    save_params(tmp_path / "c.bin", net)
    data = (tmp_path / "c.bin").read_bytes()
    # rewrite the header to claim [15, 64, 2] while keeping the larger body
    forged = b"FLRL" + struct.pack("<II", 1, 3) + struct.pack("<3I", 15, 64, 2) + data[4 + 8 + 16:]
    (tmp_path / "f.bin").write_bytes(forged)
    with pytest.raises(CorruptCheckpointError):
        load_params(tmp_path / "f.bin")


def test_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(CorruptCheckpointError):
        load_params(tmp_path / "x.bin")
