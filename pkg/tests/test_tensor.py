import math

import numpy as np
import pytest

from aoaslu import tensor as T
from aoaslu.errors import DegenerateRowError, NumericFault, ShapeError, TapeError

from conftest import fd_check


def test_matmul_identity_and_hand_value():
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), b).data, b.data)
    out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_sum_gradient_is_ones_times_bt(f64):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta, tb = T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True)
    with T.GradientTape():
        T.backward(T.sum(T.matmul(ta, tb)))
    np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T, rtol=1e-12)
    fd_check(lambda x, y: T.sum(T.matmul(x, y)), [a, b])


def test_batched_matmul_with_shared_rhs(f64):
    rng = np.random.default_rng(1)
    fd_check(lambda x, y: T.sum(T.mul(T.matmul(x, y), T.matmul(x, y))),
             [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))])
    fd_check(lambda x, y: T.sum(T.matmul(x, T.swapaxes(y))),
             [rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(2, 2, 5, 4))])


def test_softmax_values(backend, f64):
    np.testing.assert_allclose(T.softmax(T.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-15)
    y = T.softmax(T.Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.isfinite(y).all() and y[0, 0] == pytest.approx(1.0) and y[0, 1] < 1e-300
    rows = T.softmax(T.Tensor(np.random.default_rng(2).normal(size=(8, 8)))).data.sum(axis=1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-12)


def test_softmax_mask_and_degenerate_row(backend, f64):
    mask = np.array([[True, False, True], [False, False, False]])
    with pytest.raises(DegenerateRowError):
        T.softmax(T.Tensor(np.zeros((2, 3))), mask)
    y = T.softmax(T.Tensor(np.zeros((1, 3))), mask[:1]).data
    assert y.tolist() == [[0.5, 0.0, 0.5]]


def test_softmax_gradient(backend, f64):
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 5))
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    fd_check(lambda x: T.sum(T.mul(T.softmax(x, mask), T.Tensor(w))), [rng.normal(size=(4, 5))])


def test_layer_norm(backend, f64):
    g, b = T.Tensor(np.ones(4)), T.Tensor(np.zeros(4))
    np.testing.assert_allclose(T.layer_norm(T.Tensor(np.full((1, 4), 3.0)), g, b).data, 0.0, atol=1e-12)
    rng = np.random.default_rng(4)
    beta = rng.normal(size=6)
    y = T.layer_norm(T.Tensor(rng.normal(size=(5, 6))), T.Tensor(np.ones(6)), T.Tensor(beta)).data
    np.testing.assert_allclose(y.mean(axis=1), beta.mean(), atol=1e-12)
    w = rng.normal(size=(3, 6))
    fd_check(lambda x, gg, bb: T.sum(T.mul(T.layer_norm(x, gg, bb), T.Tensor(w))),
             [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)], rtol=1e-4)


def test_gelu_and_relu_gradients(backend, f64):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4)) * 2
    fd_check(lambda t: T.sum(T.gelu(t)), [x])
    x[np.abs(x) < 1e-3] = 0.5
    fd_check(lambda t: T.sum(T.relu(t)), [x])


def test_sum_of_squares_gradient(f64):
    x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with T.GradientTape():
        T.backward(T.sum(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_reused_parameter_accumulates(f64):
    x = T.Tensor([2.0], requires_grad=True)
    with T.GradientTape():
        T.backward(T.sum(T.add(T.scale(x, 3.0), T.mul(x, x))))
    assert x.grad.tolist() == [3.0 + 4.0]


def test_gradients_accumulate_across_backward_calls(f64):
    x = T.Tensor([1.0], requires_grad=True)
    for _ in range(2):
        with T.GradientTape():
            T.backward(T.sum(T.scale(x, 2.0)))
    assert x.grad.tolist() == [4.0]


def test_structural_ops_gradients(f64):
    rng = np.random.default_rng(6)
    w = rng.normal(size=(2, 6))
    fd_check(lambda a, b: T.sum(T.mul(T.concat([a, b], axis=1), T.Tensor(w))),
             [rng.normal(size=(2, 2)), rng.normal(size=(2, 4))])
    w2 = rng.normal(size=(3, 4))
    fd_check(lambda a: T.sum(T.mul(T.reshape(T.transpose(a, (1, 0, 2)), (3, 4)), T.Tensor(w2))),
             [rng.normal(size=(2, 3, 2))])
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    fd_check(lambda t: T.sum(T.mul(T.gather_rows(t, ids), T.gather_rows(t, ids))), [rng.normal(size=(4, 3))])
    fd_check(lambda a: T.sum(T.mul(T.getitem(a, (slice(None), slice(1, 3))), T.getitem(a, (slice(None), slice(0, 2))))),
             [rng.normal(size=(3, 4))])


def test_broadcast_add_reduces_gradient(f64):
    rng = np.random.default_rng(7)
    fd_check(lambda a, b: T.sum(T.mul(T.add(a, b), T.add(a, b))), [rng.normal(size=(2, 3, 4)), rng.normal(size=4)])
    fd_check(lambda a, b: T.sum(T.mul(T.sub(a, b), T.sub(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


def test_non_suffix_broadcast_rejected():
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 1))))
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_cross_entropy_uniform_and_gradient(f64):
    logits = T.Tensor(np.zeros((3, 20)), requires_grad=True)
    loss = T.cross_entropy(logits, [0, 5, 19], np.full(3, 1 / 3))
    assert float(loss.data) == pytest.approx(math.log(20), abs=1e-12)
    rng = np.random.default_rng(8)
    mask = np.ones((4, 6), dtype=bool)
    mask[:, 4] = False
    t = np.array([0, 3, 5, 1])
    w = rng.random(4)
    fd_check(lambda x: T.cross_entropy(x, t, w, mask), [rng.normal(size=(4, 6))])


def test_cross_entropy_one_hot_limit(f64):
    logits = np.full((1, 5), -50.0)
    logits[0, 2] = 50.0
    assert float(T.cross_entropy(T.Tensor(logits), [2]).data) < 1e-40


def test_no_tape_means_no_graph():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.sum(T.mul(x, x))
    assert y._node is None
    with pytest.raises(TapeError):
        T.backward(y)


def test_untracked_inputs_are_not_recorded():
    with T.GradientTape() as tape:
        T.add(T.Tensor([1.0]), T.Tensor([2.0]))
    assert len(tape) == 0


def test_backward_needs_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.GradientTape():
        with pytest.raises(TapeError):
            T.backward(T.scale(x, 2.0))


def test_dropout_identity_and_scaling():
    x = T.Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.5, None) is x
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.75)}
    assert abs(y.mean() - 1.0) < 0.02


def test_precision_switch():
    assert T.Tensor([1.0]).dtype == np.float32
    with T.precision("float64"):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.get_dtype() == np.float32
    with pytest.raises(ValueError):
        T.set_precision("float16")


def test_check_finite_raises_numeric_fault():
    with T.check_finite(), np.errstate(invalid="ignore"):
        with pytest.raises(NumericFault):
            T.mul(T.Tensor([np.inf]), T.Tensor([0.0]))
