import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prokcat import tensor as T
from conftest import assert_gradcheck


def param(rng, *shape, lo=-1.0, hi=1.0):
    return T.parameter(rng.uniform(lo, hi, shape), name=f"p{shape}")


# ---------------------------------------------------------------- forward values

def test_add_broadcasts_like_numpy(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3,))
    np.testing.assert_array_equal(T.add(a, b).data, a + b)


def test_incompatible_shapes_raise():
    with pytest.raises(T.ShapeError):
        T.add(np.zeros((2, 3)), np.zeros((4,)))
    with pytest.raises(T.ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_of_vectors_rejected():
    with pytest.raises(T.ShapeError):
        T.matmul(np.zeros(3), np.zeros(3))


def test_softmax_rows_sum_to_one_and_mask_is_exact_zero(rng):
    x = rng.normal(size=(4, 5))
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    y = T.softmax(x, axis=-1, mask=mask).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y[~mask] == 0.0)


def test_softmax_fully_masked_slice_errors():
    with pytest.raises(T.ShapeError):
        T.softmax(np.zeros((2, 3)), mask=np.array([[True, False, False], [False, False, False]]))


def test_softmax_is_stable_for_large_inputs():
    y = T.softmax(np.array([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(y, [0.5, 0.5, 0.0])


def test_mean_pool_constant_rows_and_mask():
    x = np.tile(np.array([[2.0, -1.0]]), (4, 1))
    np.testing.assert_allclose(T.mean_pool(x, axis=0).data, [2.0, -1.0])
    xb = np.array([[[1.0], [3.0], [100.0]]])
    out = T.mean_pool(xb, axis=1, mask=np.array([[True, True, False]])).data
    np.testing.assert_allclose(out, [[2.0]])


def test_mean_pool_empty_axis_errors():
    with pytest.raises(T.ShapeError):
        T.mean_pool(np.zeros((0, 3)), axis=0)


def test_sigmoid_extremes_are_finite():
    s = T.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(6, 2))
    k = rng.normal(size=(3, 2, 4))
    xp = np.vstack([np.zeros((1, 2)), x, np.zeros((1, 2))])
    want = np.stack([sum(xp[i + j] @ k[j] for j in range(3)) for i in range(6)])
    np.testing.assert_allclose(T.conv1d(x, k).data, want, atol=1e-12)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(T.ShapeError):
        T.conv1d(np.zeros((4, 2)), np.zeros((2, 2, 2)))


def test_take_rows_gathers():
    table = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(T.take_rows(table, np.array([2, 0, 2])).data, table[[2, 0, 2]])


# ---------------------------------------------------------------- gradients

def test_grad_elementwise_with_broadcast(rng):
    a, b = param(rng, 2, 3), param(rng, 3)
    assert_gradcheck(lambda: T.sum(T.mul(T.add(a, b), T.sub(a, b))), [a, b])


def test_grad_square_abs(rng):
    a = param(rng, 5, lo=0.2, hi=1.0)
    s = T.as_tensor(np.array([1, -1, 1, -1, 1.0]))
    assert_gradcheck(lambda: T.sum(T.add(T.square(a), T.absolute(T.mul(a, s)))), [a])


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "silu", "relu", "leaky_relu"])
def test_grad_activations(rng, kind):
    x = T.parameter(np.array([-1.3, -0.4, 0.35, 0.9, 2.1]), name=kind)
    w = rng.normal(size=5)
    assert_gradcheck(lambda: T.sum(T.mul(T.activation(x, kind), w)), [x])


def test_grad_batched_matmul_and_transpose(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    w = rng.normal(size=(2, 5, 3))
    assert_gradcheck(lambda: T.sum(T.mul(T.transpose(T.matmul(a, b), (0, 2, 1)), w)), [a, b])


def test_grad_linear_reshape(rng):
    x, W, b = param(rng, 3, 4), param(rng, 4, 2), param(rng, 2)
    w = rng.normal(size=(2, 3))
    assert_gradcheck(lambda: T.sum(T.mul(T.reshape(T.linear(x, W, b), (2, 3)), w)), [x, W, b])


def test_grad_sum_mean_axes(rng):
    x = param(rng, 3, 4)
    w = rng.normal(size=4)
    assert_gradcheck(lambda: T.add(T.sum(T.mul(T.mean(x, axis=0), w)), T.mean(T.sum(x, axis=1))), [x])


def test_grad_masked_softmax_and_pool(rng):
    x = param(rng, 2, 4, 3)
    mask = np.array([[True, True, True, False], [True, False, True, True]])
    w = rng.normal(size=(2, 4, 3))
    assert_gradcheck(lambda: T.sum(T.mul(T.softmax(x, axis=1, mask=mask[..., None]), w)), [x])
    w2 = rng.normal(size=(2, 3))
    assert_gradcheck(lambda: T.sum(T.mul(T.mean_pool(x, axis=1, mask=mask), w2)), [x])


def test_grad_concat_take_rows(rng):
    table, other = param(rng, 4, 3), param(rng, 5, 2)
    idx = np.array([0, 2, 2, 3, 0])
    w = rng.normal(size=(5, 5))
    assert_gradcheck(lambda: T.sum(T.mul(T.concat([T.take_rows(table, idx), other], axis=-1), w)),
                     [table, other])


def test_grad_conv1d(rng):
    x, k = param(rng, 2, 5, 3), param(rng, 3, 3, 2)
    w = rng.normal(size=(2, 5, 2))
    assert_gradcheck(lambda: T.sum(T.mul(T.conv1d(x, k), w)), [x, k])


def test_grad_bspline(rng):
    knots = np.linspace(-1.6, 1.6, 12)
    x = T.parameter(np.array([-0.77, -0.1, 0.33, 0.81]), name="x")
    w = rng.normal(size=(4, 8))
    assert_gradcheck(lambda: T.sum(T.mul(T.bspline(x, knots, 3), w)), [x])


def test_grad_shared_subexpression(rng):
    x = param(rng, 3)
    assert_gradcheck(lambda: (lambda y: T.sum(T.mul(y, y)))(T.tanh(x)), [x])


# ---------------------------------------------------------------- tape behaviour

def test_backward_requires_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, 2.0))


def test_gradients_accumulate_until_zeroed():
    x = T.parameter(np.array([1.0, 2.0]))
    T.backward(T.sum(T.mul(x, 3.0)))
    T.backward(T.sum(T.mul(x, 3.0)))
    np.testing.assert_allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(2))
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_constants_get_no_gradient():
    c = T.Tensor(np.ones(2))
    x = T.parameter(np.ones(2))
    T.backward(T.sum(T.mul(x, c)))
    assert c.grad is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_catches_nan():
    with pytest.raises(T.NonFiniteError):
        T.mul(np.array([np.inf]), 0.0)


def test_deep_chain_does_not_recurse():
    x = T.parameter(np.array([0.5]))
    y = x
    for _ in range(5000):
        y = T.mul(y, 1.0)
    T.backward(T.sum(y))
    np.testing.assert_allclose(x.grad, [1.0])


# ---------------------------------------------------------------- optimisation

def test_glorot_bounds(rng):
    w = T.glorot(rng, (30, 20))
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_adam_first_step_is_lr_times_sign():
    p = T.parameter(np.array([1.0, -2.0, 3.0]))
    state = T.AdamState.zeros_like([p])
    T.adam_step([p], [np.array([0.5, -4.0, 0.0])], state, lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_matches_reference_recurrence(rng):
    p = T.parameter(rng.normal(size=4))
    state = T.AdamState.zeros_like([p])
    ref, m, v = p.data.copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        T.adam_step([p], [g], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_minimises_quadratic():
    p = T.parameter(np.array([3.0, -2.0]))
    state = T.AdamState.zeros_like([p])
    for _ in range(2000):
        T.zero_grads([p])
        T.backward(T.sum(T.square(T.sub(p, np.array([1.0, 1.0])))))
        T.adam_step([p], [p.grad], state, lr=0.05)
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_property(values):
    y = T.softmax(np.array(values)).data
    assert np.all(y >= 0) and abs(y.sum() - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_unbroadcast_restores_shape(a, b, c):
    g = np.ones((a, b, c))
    for shape in [(b, c), (1, c), (a, 1, c), (c,), (1,)]:
        if shape[-1] not in (1, c):
            continue
        assert T._unbroadcast(g, shape).shape == shape
