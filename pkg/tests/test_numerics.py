import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stnat.numerics import (AdamState, DimensionError, Graph, GradCheckError, Tensor,
                            UsageError, adam_step, backward, concat, conv_time, exp, glu,
                            grad_check, layer_norm, log, log_softmax, matmul, mul, relu,
                            sigmoid, softmax, sum_, take, where)


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(matmul(Tensor(np.eye(2)), x).data, x.data)
    out = matmul(x, Tensor(np.array([[1.0], [1.0]])))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_of_sum(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)))
    with Graph() as g:
        loss = matmul(a, b).sum()
    g.backward(loss)
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert grad_check(matmul, [t64(rng, 3, 4), t64(rng, 4, 2)]) < 1e-8


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax family ----------------------------------------------------------

def test_softmax_examples(rng):
    assert np.allclose(softmax(Tensor(np.zeros(3))).data, 1 / 3)
    big = softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0)
    x = t64(rng, 5)
    assert softmax(x).data.sum() == pytest.approx(1.0, abs=1e-12)
    assert grad_check(softmax, [t64(rng, 6)]) <= 1e-6


def test_softmax_mask_gives_exact_zero(rng):
    x = t64(rng, 4, 5)
    mask = np.array([True, False, True, True, False])
    out = softmax(x, mask=mask).data
    assert (out[:, ~mask] == 0).all()
    assert np.allclose(out.sum(-1), 1)
    assert np.array_equal(softmax(x, mask=np.zeros(5, bool)).data, np.zeros((4, 5)))
    assert grad_check(lambda z: softmax(z, mask=mask), [t64(rng, 4, 5)]) < 1e-8


def test_log_softmax_examples(rng):
    assert np.allclose(log_softmax(Tensor(np.zeros(2))).data, -np.log(2))
    out = log_softmax(Tensor(np.array([100.0, 0.0]))).data
    assert np.isfinite(out).all() and out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] == pytest.approx(-100.0)
    x = t64(rng, 3, 7)
    assert np.allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-6)
    assert grad_check(log_softmax, [t64(rng, 3, 7)]) < 1e-8


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-300, 300)))
def test_softmax_rows_normalize(x):
    s = softmax(Tensor(x)).data
    assert (s >= 0).all()
    assert np.allclose(s.sum(-1), 1, atol=1e-6)
    assert np.allclose(np.exp(log_softmax(Tensor(x)).data).sum(-1), 1, atol=1e-6)


# -- layer norm, glu, conv -----------------------------------------------------

def test_layer_norm_examples(rng):
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(layer_norm(Tensor(np.full((1, 4), 3.0)), g, b).data, 0)
    out = layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [[1, -1]], atol=1e-4)
    gain, bias = t64(rng, 8), t64(rng, 8)
    assert grad_check(layer_norm, [t64(rng, 4, 8), gain, bias]) <= 1e-6


def test_glu_examples(rng):
    assert glu(Tensor(np.array([3.0, 0.0]))).data[0] == pytest.approx(1.5)
    assert glu(Tensor(np.array([1.0, 50.0]))).data[0] == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        glu(Tensor(np.ones(3)))
    assert grad_check(glu, [t64(rng, 3, 8)]) <= 1e-6


def test_conv_time(rng):
    w, b = Tensor(rng.standard_normal((12, 5))), Tensor(np.zeros(5))
    assert np.array_equal(conv_time(Tensor(np.zeros((7, 4))), w, b).data, np.zeros((4, 5)))
    assert conv_time(Tensor(np.ones((8, 4))), w, b).shape == (4, 5)
    assert conv_time(Tensor(np.ones((9, 4))), w, b).shape == (5, 5)
    assert grad_check(conv_time, [t64(rng, 6, 4), t64(rng, 12, 5), t64(rng, 5)]) <= 1e-6


def test_conv_time_matches_direct_loop(rng):
    x = rng.standard_normal((7, 3))
    w = rng.standard_normal((9, 2))
    b = rng.standard_normal(2)
    xp = np.vstack([np.zeros((1, 3)), x, np.zeros((2, 3))])
    ref = np.array([xp[2 * i: 2 * i + 3].reshape(-1) @ w + b for i in range(4)])
    assert np.allclose(conv_time(Tensor(x), Tensor(w), Tensor(b)).data, ref)


def test_conv_time_batched_equals_per_item(rng):
    x = rng.standard_normal((3, 5, 2))
    w, b = Tensor(rng.standard_normal((6, 4))), Tensor(rng.standard_normal(4))
    out = conv_time(Tensor(x), w, b).data
    for i in range(3):
        assert np.allclose(out[i], conv_time(Tensor(x[i]), w, b).data)


# -- elementwise and indexing ops ---------------------------------------------

@pytest.mark.parametrize("op", [exp, relu, sigmoid, lambda z: log(exp(z) + 1.0)])
def test_unary_grads(rng, op):
    x = Tensor(rng.standard_normal((3, 4)) + 0.05)   # keep relu away from its kink
    assert grad_check(op, [x]) < 1e-7


def test_broadcast_grads(rng):
    assert grad_check(lambda a, b: a * b + a / (b * b + 1.0) - b,
                      [t64(rng, 3, 4), t64(rng, 4)]) < 1e-7
    assert grad_check(lambda a: sum_(a, axis=0, keepdims=True) * a, [t64(rng, 3, 2)]) < 1e-7


def test_take_and_where_and_concat_grads(rng):
    idx = np.array([2, 0, 2])
    assert grad_check(lambda a: take(a, idx), [t64(rng, 4, 3)]) < 1e-8
    mask = rng.random((3, 3)) > 0.5
    assert grad_check(lambda a: where(mask, a, -1.0), [t64(rng, 3, 3)]) < 1e-8
    assert grad_check(lambda a, b: concat([a, b], axis=1), [t64(rng, 2, 3), t64(rng, 2, 1)]) < 1e-8


def test_reshape_transpose_grads(rng):
    assert grad_check(lambda a: a.reshape(6, 2).T @ a.reshape(6, 2), [t64(rng, 3, 4)]) < 1e-7


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with Graph() as g:
        loss = x.sum()
    backward(loss, g)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_fanout_adds_paths(rng):
    data = rng.standard_normal(4)
    x = Tensor(data.copy(), requires_grad=True)
    w1, w2 = rng.standard_normal(4), rng.standard_normal(4)
    with Graph() as g:
        loss = (x * Tensor(w1)).sum() + (exp(x) * Tensor(w2)).sum()
    g.backward(loss)
    both = x.grad.copy()
    singles = []
    for f in (lambda z: (z * Tensor(w1)).sum(), lambda z: (exp(z) * Tensor(w2)).sum()):
        y = Tensor(data.copy(), requires_grad=True)
        with Graph() as g:
            out = f(y)
        g.backward(out)
        singles.append(y.grad)
    assert np.allclose(both, singles[0] + singles[1])


def test_backward_chain_matches_fd(rng):
    assert grad_check(lambda a, b: mul(matmul(a, b), matmul(a, b)), [t64(rng, 3, 3), t64(rng, 3, 2)]) < 1e-7


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Graph() as g:
        y = x * 2.0
    with pytest.raises(UsageError):
        g.backward(y)


def test_no_recording_outside_graph(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Graph() as g:
        pass
    _ = x * 2.0
    assert len(g) == 0


def test_backward_reverse_order():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with Graph() as g:
        a = x * 2.0
        b = exp(a)
        c = b.sum()
    assert [n for n in g.nodes][-1] is not None
    g.backward(c)
    assert x.grad[0] == pytest.approx(2 * np.exp(2.0))


# -- grad_check and adam --------------------------------------------------------

def test_grad_check_linear_is_exact(rng):
    w = t64(rng, 4, 3)
    assert grad_check(lambda a: matmul(a, w), [t64(rng, 2, 4)]) < 1e-9


def test_grad_check_flags_wrong_gradient(rng):
    from stnat.numerics import _result

    def bad(a):
        return _result(a.data ** 2, (a,), lambda g: (g * a.data,))   # missing factor 2

    with pytest.raises(GradCheckError):
        grad_check(bad, [t64(rng, 3)], tol=1e-5)


def test_grad_check_requires_double(rng):
    with pytest.raises(UsageError):
        grad_check(exp, [Tensor(rng.standard_normal(3).astype(np.float32))])


def test_adam_zero_gradient_is_identity(rng):
    p = Tensor(rng.standard_normal(5), requires_grad=True)
    before = p.data.copy()
    st_ = AdamState.for_params([p])
    for _ in range(3):
        adam_step([p], [np.zeros(5)], st_, 0.1)
    assert np.array_equal(p.data, before)
    assert st_.step == 3


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step([p], [np.array([1.0])], AdamState.for_params([p]), 0.01)
    assert p.data[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True)
    s = AdamState.for_params([p])
    for _ in range(200):
        adam_step([p], [2 * p.data], s, 0.1)
    assert abs(p.data[0]) < 0.05


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step([p, p], [None, None], AdamState.for_params([p]), 0.1)


def test_adam_bad_gradient_shape_leaves_state_untouched():
    p = Tensor(np.zeros(2), requires_grad=True)
    s = AdamState.for_params([p])
    with pytest.raises(DimensionError):
        adam_step([p], [np.ones(3)], s, 0.1)
    assert s.step == 0
