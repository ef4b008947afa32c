import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motok import tensor as T
from motok.errors import ShapeError, UsageError

from fd import max_rel_error, numeric_grad


def t64(x):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_linear_map_gradient_is_broadcast_of_input():
    rng = np.random.default_rng(0)
    w = t64(rng.normal(size=(3, 4)))
    x = np.asarray(rng.normal(size=(4, 2)), dtype=np.float64)
    loss = T.sum_(T.matmul(w, T.Tensor(x)))
    T.backward(loss)
    # d/dW sum(Wx) = outer structure: grad[i, j] = sum_k x[j, k]
    expected = np.broadcast_to(x.sum(axis=1), (3, 4))
    assert np.allclose(w.grad, expected)


def test_two_backwards_double_gradients():
    x = t64([1.0, 2.0, 3.0])
    loss = T.sum_(T.square(x))
    T.backward(loss)
    first = x.grad.copy()
    loss2 = T.sum_(T.square(x))
    T.backward(loss2)
    assert np.array_equal(x.grad, 2 * first)


def test_backward_without_tape_raises():
    with T.no_grad():
        y = T.sum_(T.square(T.Tensor([1.0, 2.0])))
    with pytest.raises(UsageError):
        T.backward(y)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0])
    y = T.square(x)
    with pytest.raises(ShapeError):
        T.backward(y)


@pytest.mark.parametrize("op,extra", [
    (T.silu, None),
    (T.gelu, None),
    (T.square, None),
])
def test_unary_grads_match_fd(op, extra):
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(3, 4))

    def f(x):
        return float(T.sum_(op(T.Tensor(x, dtype=np.float64))).data)

    xt = t64(x0)
    T.backward(T.sum_(op(xt)))
    assert max_rel_error(xt.grad, numeric_grad(f, x0.copy())) < 1e-3


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(4)
    a0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=(3, 4))

    def fa(a):
        return float(T.sum_(T.square(T.matmul(T.Tensor(a, dtype=np.float64), T.Tensor(b0, dtype=np.float64)))).data)

    at, bt = t64(a0), t64(b0)
    T.backward(T.sum_(T.square(T.matmul(at, bt))))
    assert max_rel_error(at.grad, numeric_grad(fa, a0.copy())) < 1e-3


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(5)
    a0 = rng.normal(size=(2, 3, 4))
    w0 = rng.normal(size=(4, 5))

    def fw(w):
        return float(T.sum_(T.square(T.matmul(T.Tensor(a0, dtype=np.float64), T.Tensor(w, dtype=np.float64)))).data)

    at, wt = t64(a0), t64(w0)
    T.backward(T.sum_(T.square(T.matmul(at, wt))))
    assert max_rel_error(wt.grad, numeric_grad(fw, w0.copy())) < 1e-3


def test_softmax_rows_sum_to_one_and_grad():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(5, 7))
    s = T.softmax(T.Tensor(x0))
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)

    w = rng.normal(size=(5, 7))

    def f(x):
        return float((T.softmax(T.Tensor(x, dtype=np.float64)).data * w).sum())

    xt = t64(x0)
    T.backward(T.sum_(T.mul(T.softmax(xt), T.Tensor(w, dtype=np.float64))))
    assert max_rel_error(xt.grad, numeric_grad(f, x0.copy())) < 1e-3


def test_masked_softmax_zeroes_disallowed():
    x = T.Tensor(np.zeros((2, 3)))
    bias = np.array([[0, -np.inf, 0], [0, 0, -np.inf]], dtype=np.float32)
    s = T.softmax(x, bias=bias)
    assert s.data[0, 1] == 0.0 and s.data[1, 2] == 0.0
    assert np.allclose(s.data.sum(axis=-1), 1.0)


def test_cross_entropy_values_and_grad():
    # uniform logits over V classes -> nll = log V
    V = 8
    logits = T.Tensor(np.zeros((3, V), dtype=np.float64), requires_grad=True)
    nll = T.cross_entropy(logits, np.array([0, 3, 7]), reduce="mean")
    assert np.isclose(float(nll.data), np.log(V))

    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(4, 5))
    tgt = np.array([0, 2, 4, 1])

    def f(x):
        return float(T.cross_entropy(T.Tensor(x, dtype=np.float64), tgt, reduce="mean").data)

    xt = t64(x0)
    T.backward(T.cross_entropy(xt, tgt, reduce="mean"))
    assert max_rel_error(xt.grad, numeric_grad(f, x0.copy())) < 1e-3


def test_smooth_l1_closed_form():
    m = np.zeros((2, 4))
    assert float(T.smooth_l1(T.Tensor(m + 0.5), m).data) == pytest.approx(0.125)
    assert float(T.smooth_l1(T.Tensor(m + 2.0), m).data) == pytest.approx(1.5)
    assert float(T.smooth_l1(T.Tensor(m), m).data) == 0.0


def test_smooth_l1_grad_matches_fd():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(3, 3)) * 2.0
    tgt = rng.normal(size=(3, 3))

    def f(x):
        return float(T.smooth_l1(T.Tensor(x, dtype=np.float64), tgt).data)

    xt = t64(x0)
    T.backward(T.smooth_l1(xt, tgt))
    assert max_rel_error(xt.grad, numeric_grad(f, x0.copy())) < 1e-3


def test_straight_through_forward_and_backward():
    z = t64([[1.0, 2.0], [3.0, 4.0]])
    zq = np.array([[1.5, 1.5], [2.5, 2.5]])
    out = T.straight_through(z, zq)
    assert np.array_equal(out.data, zq)
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    T.backward(T.sum_(T.mul(out, T.Tensor(w, dtype=np.float64))))
    assert np.array_equal(z.grad, w)  # gradient passes through unchanged


def test_straight_through_shape_mismatch():
    with pytest.raises(ShapeError):
        T.straight_through(t64([[1.0]]), np.zeros((2, 2)))


def test_gather_rows_scatter_grad():
    table = t64(np.arange(12, dtype=np.float64).reshape(4, 3))
    idx = np.array([0, 2, 2])
    out = T.gather_rows(table, idx)
    T.backward(T.sum_(out))
    expected = np.array([[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]], dtype=np.float64)
    assert np.array_equal(table.grad, expected)


def test_concat_and_narrow_roundtrip_grads():
    a, b = t64(np.ones((2, 3))), t64(np.ones((2, 2)) * 2)
    cat = T.concat([a, b], axis=1)
    back = T.narrow(cat, 1, 3, 2)
    T.backward(T.sum_(T.square(back)))
    assert np.allclose(a.grad, 0.0)
    assert np.allclose(b.grad, 4.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
def test_mean_sum_consistency(vals):
    x = T.Tensor(np.asarray(vals, dtype=np.float64))
    assert np.isclose(float(T.mean_(x).data), np.mean(vals))
    assert np.isclose(float(T.sum_(x).data), np.sum(vals))


def test_no_grad_builds_no_graph():
    x = t64([1.0, 2.0])
    with T.no_grad():
        y = T.square(x)
    assert y._backward is None and not y.requires_grad
