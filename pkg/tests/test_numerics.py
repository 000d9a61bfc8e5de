import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from faultxformer.numerics import ops
from faultxformer.numerics.gradcheck import fd_check
from faultxformer.numerics.optim import Adam, AdamState, adam_step
from faultxformer.numerics.tensor import GradTape, ShapeError, Tensor, no_grad

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# --- forward values -------------------------------------------------------------

def test_matmul_hand_values():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_identity(rng):
    m = rng.standard_normal((2, 2))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_values():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75],
                               atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    p = ops.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ops.softmax(Tensor(x + c)).data, p, atol=1e-12)


def test_layer_norm_values():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = ops.layer_norm(Tensor([1.0, 2.0, 3.0]), g, b).data
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-3)
    flat = ops.layer_norm(Tensor([5.0] * 4), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(flat, np.zeros(4))


@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes(x):
    x = x + np.linspace(0, 5, 6)  # keep variance well above eps
    out = ops.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
    var = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), atol=1e-6)


def test_linear_param_counts():
    assert ops.linear_param_count(68, 64) == 4416
    assert ops.linear_param_count(128, 90) == 11610


def test_linear_zero_weight_gives_bias():
    out = ops.linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 2))), Tensor([2.0, -1.0]))
    np.testing.assert_array_equal(out.data, [[2.0, -1.0]] * 3)


def test_linear_shape_errors():
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((5, 2))))
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(3)))


def test_relu_and_dropout_identities(rng):
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = Tensor(rng.standard_normal((4, 4)))
    assert ops.dropout(x, 0.0, True, rng) is x
    assert ops.dropout(x, 0.5, False) is x
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        ops.dropout(x, -0.1, True, rng)


def test_dropout_keeps_expectation():
    x = Tensor(np.ones(200_000))
    y = ops.dropout(x, 0.3, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.7}
    assert abs(y.mean() - 1.0) < 0.01
    assert abs((y == 0).mean() - 0.3) < 0.01


def test_cross_entropy_values():
    assert ops.cross_entropy(Tensor(np.zeros((2, 8))), [3, 5]).item() == pytest.approx(math.log(8))
    assert ops.cross_entropy(Tensor([[0.0, math.log(3)]]), [1]).item() == pytest.approx(
        -math.log(0.75), abs=1e-12)
    big = ops.cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item()
    assert 0.0 <= big < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor([[0.0, math.log(3)], [1.0, 1.0]], requires_grad=True)
    ops.cross_entropy(logits, [1, 0]).backward()
    expected = (np.array([[0.25, 0.75], [0.5, 0.5]]) - np.array([[0, 1], [1, 0]])) / 2
    np.testing.assert_allclose(logits.grad, expected, atol=1e-15)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(IndexError, match="target 3"):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# --- autodiff --------------------------------------------------------------

def test_fd_check_quadratic(rng):
    assert fd_check(lambda x: ops.sum(ops.square(x)), Tensor(rng.standard_normal(7))) < 1e-6


def test_fd_check_validates_step(rng):
    with pytest.raises(ValueError):
        fd_check(lambda x: ops.sum(x), Tensor(rng.standard_normal(3)), h=1e-3)
    with pytest.raises(ValueError):
        fd_check(lambda x: x, Tensor(rng.standard_normal(3)))


def test_fd_check_cross_entropy_of_linear(rng):
    w, b = param(rng, 3, 5), param(rng, 5)
    y = np.array([0, 4, 2, 1])
    x = Tensor(rng.standard_normal((4, 3)))
    assert fd_check(lambda t: ops.cross_entropy(ops.linear(t, w, b), y), x) < 1e-4
    assert fd_check(lambda t: ops.cross_entropy(ops.linear(x, t, b), y), w) < 1e-4


UNARY = {
    "relu": lambda x: ops.relu(x),
    "softmax": lambda x: ops.softmax(x),
    "square": lambda x: ops.square(x),
    "mean_axis": lambda x: ops.mean(x, axis=1, keepdims=True),
    "sum_axis": lambda x: ops.sum(x, axis=0),
    "reshape": lambda x: ops.reshape(x, (6, 2)),
    "transpose": lambda x: ops.transpose(x, (1, 0, 2)),
    "swapaxes": lambda x: ops.swapaxes(x, 0, 2),
    "getitem_basic": lambda x: x[:, 1:3],
    "getitem_fancy": lambda x: x[np.array([0, 0, 1])],
    "scale": lambda x: ops.scale(x, -2.5),
    "neg_sub": lambda x: 1.0 - x,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    op = UNARY[name]
    x = Tensor(rng.standard_normal((2, 3, 2)) + 0.1)  # keep relu inputs off the kink
    w = rng.standard_normal(op(Tensor(x.data.copy())).shape)
    assert fd_check(lambda t: ops.sum(ops.mul(op(t), w)), x) < 1e-4


@pytest.mark.parametrize("shape_b", [(3, 4), (4,), (1, 4), (3, 1)])
def test_broadcast_binary_gradients(shape_b, rng):
    a, b = param(rng, 3, 4), param(rng, *shape_b)
    w = rng.standard_normal((3, 4))
    for op in (ops.add, ops.sub, ops.mul):
        assert fd_check(lambda t: ops.sum(ops.mul(op(a, t), w)), b) < 1e-4
        assert fd_check(lambda t: ops.sum(ops.mul(op(t, b), w)), a) < 1e-4


def test_batched_matmul_gradient(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    assert fd_check(lambda t: ops.sum(ops.square(ops.matmul(t, b))), a) < 1e-4
    assert fd_check(lambda t: ops.sum(ops.square(ops.matmul(a, t))), b) < 1e-4


def test_sum_of_product_gradient_is_ones_times_bt(rng):
    a, b = param(rng, 3, 4), Tensor(rng.standard_normal((4, 2)))
    ops.sum(ops.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)


def test_layer_norm_gradients(rng):
    x, g, b = param(rng, 2, 3, 6), param(rng, 6), param(rng, 6)
    w = rng.standard_normal((2, 3, 6))
    f = lambda: ops.sum(ops.mul(ops.layer_norm(x, g, b), w))
    for t in (x, g, b):
        assert fd_check(lambda _: f(), t) < 1e-4


def test_fused_attention_matches_composite(rng):
    b, n, h, d = 2, 5, 2, 8
    qkv = rng.standard_normal((b, n, 3 * d))
    out, weights = ops.fused_self_attention(Tensor(qkv), h, return_weights=True)
    heads = qkv.reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
    s = heads[0] @ heads[1].swapaxes(-1, -2) / math.sqrt(d // h)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    ref = (p @ heads[2]).transpose(0, 2, 1, 3).reshape(b, n, d)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_allclose(weights, p, atol=1e-12)


def test_fused_attention_gradient(rng):
    w = rng.standard_normal((2, 5, 8))
    x = Tensor(rng.standard_normal((2, 5, 24)))
    assert fd_check(lambda t: ops.sum(ops.mul(ops.fused_self_attention(t, 2), w)), x) < 1e-4


def test_fused_attention_rejects_bad_width():
    with pytest.raises(ShapeError):
        ops.fused_self_attention(Tensor(np.zeros((1, 2, 10))), 2)


def test_tape_replays_in_reverse_recording_order(rng):
    x = param(rng, 3)
    y = ops.mul(x, x)
    z = ops.add(y, x)
    loss = ops.sum(ops.mul(z, y))
    tape = GradTape.collect(loss)
    seqs = [n.seq for n in tape.nodes]
    assert seqs == sorted(seqs) and len(seqs) == 4
    for node in tape.nodes:  # inputs were recorded before the node
        assert all(i.node is None or i.node.seq < node.seq for i in node.inputs)
    loss.backward()
    xv = x.data
    np.testing.assert_allclose(x.grad, 4 * xv ** 3 + 3 * xv ** 2)


def test_reused_tensor_accumulates_gradient(rng):
    x = param(rng, 4)
    ops.sum(ops.add(ops.mul(x, 2.0), ops.mul(x, 3.0))).backward()
    np.testing.assert_allclose(x.grad, np.full(4, 5.0))


def test_backward_populates_every_reachable_parameter(rng):
    w1, w2, unused = param(rng, 3, 3), param(rng, 3, 2), param(rng, 2)
    ops.sum(ops.matmul(ops.relu(ops.matmul(Tensor(rng.standard_normal((4, 3))), w1)), w2)).backward()
    assert w1.grad.shape == w1.shape and w2.grad.shape == w2.shape
    assert unused.grad is None


def test_no_grad_records_nothing(rng):
    x = param(rng, 3)
    with no_grad():
        y = ops.mul(x, x)
    assert y.node is None and not y.requires_grad


def test_non_scalar_backward_needs_grad(rng):
    with pytest.raises(ValueError):
        ops.mul(param(rng, 3), 2.0).backward()


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_is_identity(rng):
    p = rng.standard_normal((3, 2))
    before = p.copy()
    adam_step([p], [np.zeros_like(p)], AdamState.zeros_like([p]))
    np.testing.assert_array_equal(p, before)


def test_adam_first_step_moves_by_lr():
    p = np.zeros(5)
    adam_step([p], [np.ones(5)], AdamState.zeros_like([p]), lr=1e-3)
    # m_hat / sqrt(v_hat) = 1 / (1 + eps)
    np.testing.assert_allclose(p, -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_matches_closed_form_two_steps():
    p, st_ = np.array([1.0]), AdamState.zeros_like([np.array([1.0])])
    g1, g2 = 0.5, -2.0
    adam_step([p], [np.array([g1])], st_, lr=0.1)
    adam_step([p], [np.array([g2])], st_, lr=0.1)
    m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
    step1 = 0.1 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 ** 2
    step2 = 0.1 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p[0] == pytest.approx(1.0 - step1 - step2, abs=1e-14)
    assert st_.t == 2


def test_adam_rejects_bad_step_index():
    p = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step([p], [p], AdamState.zeros_like([p]), t=0)


def test_adam_is_deterministic(rng):
    init = rng.standard_normal((4, 3))
    data = rng.standard_normal((10, 4))

    def run():
        w = Tensor(init.copy(), requires_grad=True)
        opt = Adam([w])
        for i in range(5):
            opt.zero_grad()
            ops.sum(ops.square(ops.matmul(Tensor(data[i:i + 2]), w))).backward()
            opt.step()
        return w.data

    assert run().tobytes() == run().tobytes()
