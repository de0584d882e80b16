import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from regformer import tensor as T
from regformer.errors import ConfigurationError, EmptyLossError, NonFiniteError, ShapeError
from regformer.tensor import AdamState, Tensor


def numeric_grad(f, x: np.ndarray, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check_grad(build, *arrays, tol=1e-6):
    """``build(*tensors)`` returns a scalar Tensor; compare autodiff with central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(build(*leaves))
    for leaf in leaves:
        num = numeric_grad(lambda: float(build(*[Tensor(l.data) for l in leaves]).data), leaf.data)
        np.testing.assert_allclose(leaf.grad, num, atol=tol, rtol=tol)


def weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(t * w)


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_scalar():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data[0, 0] == 6.0


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3, 4), (2, 2, 4, 3))])
def test_matmul_gradients(rng, shape_a, shape_b):
    a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
    w = rng.normal(size=shape_a[:-1] + shape_b[-1:])
    check_grad(lambda x, y: weighted_sum(T.matmul(x, y), w), a, b)


# ---------------------------------------------------------------- elementwise and shape ops


def test_broadcast_add_mul_gradients(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    w = rng.normal(size=(3, 4))
    check_grad(lambda x, y: weighted_sum(x * y + y - x, w), a, b)


def test_relu_reshape_transpose_gradients(rng):
    a = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 6))
    check_grad(lambda x: weighted_sum(T.reshape(T.transpose(T.relu(x), (2, 0, 1)), (4, 6)), w), a)


def test_embedding_gradient_accumulates_repeated_ids(rng):
    table = rng.normal(size=(5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    w = rng.normal(size=(2, 3, 3))
    check_grad(lambda t: weighted_sum(T.embedding(t, ids), w), table)


def test_take_rows_gradient(rng):
    a = rng.normal(size=(2, 3, 4))
    rows = np.array([5, 0, 2])
    w = rng.normal(size=(3, 4))
    check_grad(lambda x: weighted_sum(T.take_rows(x, rows), w), a)


def test_dropout_is_identity_outside_training(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert T.dropout(x, 0.5, None, train=False) is x
    with pytest.raises(ConfigurationError):
        T.dropout(x, 0.5, None, train=True)


def test_dropout_scales_kept_units():
    x = Tensor(np.ones((200, 50)))
    out = T.dropout(x, 0.25, np.random.default_rng(0), train=True).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.02


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(T.layer_norm(Tensor([1.0, 1.0, 1.0]), one, zero).data, 0.0, atol=1e-12)
    out = T.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)
    # the epsilon shows up exactly as 1/sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), atol=1e-15)
    out = T.layer_norm(Tensor([3.0, -7.0]), Tensor(np.zeros(2)), Tensor([5.0, 5.0])).data
    np.testing.assert_array_equal(out, [5.0, 5.0])


def test_layer_norm_gradients(rng):
    x, g, b = rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))
    check_grad(lambda a, gain, bias: weighted_sum(T.layer_norm(a, gain, bias), w), x, g, b)


# ---------------------------------------------------------------- masked softmax


def test_masked_softmax_examples():
    out = T.masked_softmax(Tensor([[1.0, 1.0]]), np.array([[True, False]])).data
    np.testing.assert_array_equal(out, [[1.0, 0.0]])
    np.testing.assert_allclose(T.masked_softmax(Tensor([[0.0, 0.0, 0.0]]), np.ones((1, 3), bool)).data, 1 / 3)
    out = T.masked_softmax(Tensor([[math.log(2), 0.0]]), np.ones((1, 2), bool)).data
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)


def test_masked_softmax_rejects_fully_hidden_row():
    with pytest.raises(ConfigurationError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
    hnp.arrays(bool, (4, 6)),
)
def test_masked_softmax_rows_sum_to_one_and_hidden_cells_are_zero(scores, mask):
    mask[:, 0] |= ~mask.any(axis=1)
    p = T.masked_softmax(Tensor(scores), mask).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(p[~mask] == 0.0)


def test_masked_softmax_gradient(rng):
    s = rng.normal(size=(2, 3, 4))
    mask = rng.random((3, 4)) > 0.4
    mask[:, 1] = True
    w = rng.normal(size=(2, 3, 4))
    check_grad(lambda x: weighted_sum(T.masked_softmax(x, mask), w), s)


# ---------------------------------------------------------------- loss


def test_cross_entropy_examples():
    loss = T.cross_entropy_label_smoothed(Tensor(np.zeros((1, 4))), np.array([2]), 0.0)
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)
    logits = np.full((1, 5), -50.0)
    logits[0, 3] = 50.0
    assert float(T.cross_entropy_label_smoothed(Tensor(logits), np.array([3]), 0.0).data) < 1e-12
    # V=2, uniform logits: 0.9 * ln2 + 0.1 * ln2
    loss = T.cross_entropy_label_smoothed(Tensor(np.zeros((1, 2))), np.array([0]), 0.1)
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_matches_explicit_smoothed_distribution(rng):
    logits = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    ignore = np.array([False, True, False, False, True])
    eps = 0.1
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    q = np.full((5, 7), eps / 7)
    q[np.arange(5), targets] += 1 - eps
    expected = -(q * logp).sum(axis=1)[~ignore].mean()
    got = T.cross_entropy_label_smoothed(Tensor(logits), targets, eps, ignore)
    assert float(got.data) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_ignored_rows_get_exactly_zero_gradient(rng):
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    ignore = np.array([True, False, True, False, False, True])
    T.backward(T.cross_entropy_label_smoothed(x, rng.integers(0, 5, 6), 0.1, ignore))
    assert np.all(x.grad[ignore] == 0.0)
    assert np.all(np.abs(x.grad[~ignore]).sum(axis=1) > 0)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(4, 6))
    targets = rng.integers(0, 6, 4)
    ignore = np.array([False, True, False, False])
    check_grad(lambda x: T.cross_entropy_label_smoothed(x, targets, 0.1, ignore), logits)


def test_cross_entropy_all_ignored_is_an_error():
    with pytest.raises(EmptyLossError):
        T.cross_entropy_label_smoothed(Tensor(np.zeros((2, 3))), np.array([0, 1]), 0.1, np.array([True, True]))


# ---------------------------------------------------------------- backward


def test_backward_simple_cases():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor([3.0], requires_grad=True)
    T.backward(T.tsum(y * y))
    assert y.grad[0] == 6.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_unused_leaf_keeps_zero_grad():
    used = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    T.backward(T.tsum(used * used))
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    T.backward(T.tsum(y + y * 3.0))  # 4 x^2 -> 8x
    assert x.grad[0] == 16.0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert T.is_grad_enabled()


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    T.adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr_against_the_sign():
    p = {"w": Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)}
    state = AdamState()
    T.adam_step(p, {"w": np.array([3.0, -0.01, 1e-3])}, state, lr=0.01)
    # bias-corrected m/sqrt(v) = g/|g| on step one
    np.testing.assert_allclose(p["w"].data, 0.5 - 0.01 * np.array([1, -1, 1]), atol=1e-8)
    assert state.step == 1


def test_adam_constant_gradient_steps_do_not_grow():
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    g = np.array([1.0, -2.0, 0.3, 5.0])
    state = AdamState()
    prev = p["w"].data.copy()
    deltas = []
    for _ in range(3):
        T.adam_step(p, {"w": g}, state, lr=0.1)
        deltas.append(np.abs(p["w"].data - prev))
        prev = p["w"].data.copy()
    assert np.all(deltas[1] <= deltas[0] + 1e-15)
    assert np.all(deltas[2] <= deltas[1] + 1e-15)


def test_adam_nan_gradient_names_the_parameter():
    p = {"layer.w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(NonFiniteError, match="layer.w"):
        T.adam_step(p, {"layer.w": np.array([0.0, np.nan])}, AdamState(), lr=0.1)


# ---------------------------------------------------------------- positions and precision


def test_sinusoidal_positions():
    pe = T.sinusoidal_positions(0, 1, 8)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    pe = T.sinusoidal_positions(3, 5, 6)
    for i, p in enumerate(range(3, 8)):
        assert abs(pe[i, 0] - math.sin(p)) < 1e-12
        assert abs(pe[i, 3] - math.cos(p / 10000 ** (2 / 6))) < 1e-12
    np.testing.assert_array_equal(pe, T.sinusoidal_positions(3, 5, 6))
    with pytest.raises(ConfigurationError):
        T.sinusoidal_positions(0, 2, 5)


def test_precision_switch_is_scoped():
    with T.precision(np.float32):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tsum(x * 3.0)
        T.backward(y)
        assert x.data.dtype == np.float32 and x.grad.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
