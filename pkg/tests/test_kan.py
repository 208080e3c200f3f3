import numpy as np
import pytest

from prokcat import tensor as T
from prokcat.kan import (BSplineGrid, KanEdge, KanNetwork, bspline_basis, edge_eval, kan_forward,
                         lstsq_coefficients, param_count, silu)
from conftest import assert_gradcheck


def test_grid_sizes():
    g = BSplineGrid(-1.0, 1.0, 5, 3)
    assert g.n_basis == 8 and len(g.knots) == 12
    np.testing.assert_allclose(np.diff(g.knots), 0.4)


def test_grid_validation():
    with pytest.raises(ValueError):
        BSplineGrid(1.0, -1.0)
    with pytest.raises(ValueError):
        BSplineGrid(intervals=0)


@pytest.mark.parametrize("order", [1, 2, 3, 5])
def test_partition_of_unity_and_nonnegativity(order, rng):
    g = BSplineGrid(-2.0, 3.0, 7, order)
    x = rng.uniform(-2.0, 3.0, 500)
    B = bspline_basis(x, g)
    assert np.all(B >= 0)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)


def test_local_support(rng):
    g = BSplineGrid(-1.0, 1.0, 5, 3)
    x = rng.uniform(-1, 1, 200)
    B = bspline_basis(x, g)
    assert np.all((B > 0).sum(axis=1) <= g.order + 1)


def test_linear_order_gives_hat_functions():
    # at an interior knot a degree-1 basis is exactly one hat function at its peak
    g = BSplineGrid(0.0, 1.0, 4, 1)
    B = bspline_basis(0.5, g)
    assert (B == 1.0).sum() == 1 and B.sum() == 1.0


def test_basis_derivative_matches_finite_difference():
    from prokcat import _kernels
    g = BSplineGrid(-1.0, 1.0, 5, 3)
    x = np.array([-0.83, -0.31, 0.07, 0.52, 0.9])
    _, d = _kernels.bspline_basis(x, g.knots, g.order)
    h = 1e-6
    fd = (bspline_basis(x + h, g) - bspline_basis(x - h, g)) / (2 * h)
    np.testing.assert_allclose(d, fd, atol=1e-6)


def test_edge_formula():
    g = BSplineGrid()
    c = np.linspace(-1, 1, g.n_basis)
    e = KanEdge(0.7, 1.3, c, g)
    x = np.array([-0.5, 0.25])
    np.testing.assert_allclose(edge_eval(e, x), 0.7 * silu(x) + 1.3 * bspline_basis(x, g) @ c)


def test_lstsq_recovers_spline(rng):
    g = BSplineGrid()
    c = rng.normal(size=g.n_basis)
    x = np.linspace(-1, 1, 200)
    np.testing.assert_allclose(lstsq_coefficients(g, x, bspline_basis(x, g) @ c), c, atol=1e-9)


def test_cubic_splines_reproduce_cubics():
    g = BSplineGrid(-1, 1, 5, 3)
    x = np.linspace(-1, 1, 101)
    y = 0.5 * x ** 3 - x + 0.2
    c = lstsq_coefficients(g, x, y)
    np.testing.assert_allclose(bspline_basis(x, g) @ c, y, atol=1e-10)


def test_param_count_default_head():
    net = KanNetwork([5, 1], BSplineGrid(intervals=5, order=3))
    assert param_count(net) == 51
    assert sum(p.data.size for p in net.parameters().values()) == 51


def test_zero_net_outputs_zero():
    net = KanNetwork([5, 3, 1], zero=True)
    assert np.all(kan_forward(net, np.ones((4, 5))).data == 0.0)


def test_forward_matches_edge_sum(rng):
    net = KanNetwork([3, 2], rng=rng)
    x = rng.uniform(-1, 1, (6, 3))
    out = kan_forward(net, x).data
    want = np.stack([sum(edge_eval(net.edge(0, j, i), x[:, i]) for i in range(3)) + net.bias[0].data[j]
                     for j in range(2)], axis=1)
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_single_input_vector(rng):
    net = KanNetwork([3, 1], rng=rng)
    x = rng.uniform(-1, 1, 3)
    assert kan_forward(net, x).shape == (1,)
    np.testing.assert_allclose(kan_forward(net, x).data, kan_forward(net, x[None]).data[0])


def test_width_mismatch():
    with pytest.raises(T.ShapeError):
        kan_forward(KanNetwork([3, 1]), np.zeros((2, 4)))


def test_kan_gradcheck(rng):
    net = KanNetwork([3, 2, 1], BSplineGrid(intervals=4, order=3), rng=rng)
    x = T.parameter(rng.uniform(-0.9, 0.9, (4, 3)), "x")
    y = rng.normal(size=4)
    fn = lambda: T.sum(T.square(T.sub(T.reshape(kan_forward(net, x), (4,)), y)))  # noqa: E731
    assert_gradcheck(fn, [x] + list(net.parameters().values()))


def test_kan_fits_sine(rng):
    net = KanNetwork([1, 1], BSplineGrid(intervals=8), rng=rng)
    x = np.linspace(-1, 1, 64)[:, None]
    y = np.sin(2.5 * x[:, 0])
    params = list(net.parameters().values())
    state = T.AdamState.zeros_like(params)
    for _ in range(1500):
        T.zero_grads(params)
        loss = T.mean(T.square(T.sub(T.reshape(kan_forward(net, x), (64,)), y)))
        T.backward(loss)
        T.adam_step(params, [p.grad for p in params], state, lr=0.02)
    assert float(loss.data) < 1e-3
